//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use tsm_core::discontinuity::{
    analyze, degree_of_indices, enumerate_regions, region_degree, search_procedures, DiscontinuityReport,
    EliminationOptions,
};
use tsm_core::model::{
    calibrate_channels, charbonnier_grad_check, charbonnier_loss, total_loss, trajectory_loss, Architecture,
    PAPER_GMACS, PAPER_PARAMS,
};
use tsm_core::numerics::{bicubic_upsample, read_tstf, ModelConfig, Similarity, Tensor};
use tsm_core::scanorder::{generate_scan, ScanOrder, ScanVariant, ShiftSpec, WindowPartition};
use tsm_core::ssm::{gather, grad_check, scan_apply, scatter_into, ss3d_ordering, SelectiveScanParams};
use tsm_core::trajectory::{select_tokens, token_center, TokenField, TrajectorySet};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn tsm(args: &[&str]) -> (i32, Value) {
    let out = Command::new(tsm_verify::tsm_binary())
        .args(args)
        .output()
        .expect("run tsm");
    let v = serde_json::from_slice(&out.stdout).unwrap_or(Value::Null);
    (out.status.code().unwrap_or(-1), v)
}

fn triple(r: &DiscontinuityReport) -> (u32, u32, u32) {
    (r.delta, r.delta_intra, r.delta_inter)
}

fn c1() -> Outcome {
    let (code, v) = tsm(&[
        "disc", "analyze", "--first", "scan1", "--shift", "U1", "--second", "scan3", "--grid", "8", "--window", "4",
    ]);
    let p = &v["payload"];
    let got = (p["delta"].as_u64(), p["delta_intra"].as_u64(), p["delta_inter"].as_u64());
    let want = (Some(18), Some(18), Some(0));
    outcome(
        code == 0 && got == want,
        format!("(delta, intra, inter) = {got:?}, expected {want:?}"),
    )
}

fn mirror_equal(a: &DiscontinuityReport, b: &DiscontinuityReport) -> bool {
    let g = a.grid_size;
    if triple(a) != triple(b) || a.regions.len() != b.regions.len() {
        return false;
    }
    a.regions.iter().all(|ra| {
        let m = (ra.anchor.0, g - 2 - ra.anchor.1);
        b.regions.iter().any(|rb| {
            rb.anchor == m
                && (rb.kind, rb.d_first, rb.d_second, rb.eliminated) == (ra.kind, ra.d_first, ra.d_second, ra.eliminated)
        })
    })
}

fn c2() -> Outcome {
    let ul = analyze(ScanVariant::Scan1, ShiftSpec::new(-3, -3), ScanVariant::Scan3, 8, 4).unwrap();
    let ur = analyze(ScanVariant::Scan1, ShiftSpec::new(-3, 3), ScanVariant::Scan3, 8, 4).unwrap();
    let sym = mirror_equal(&ul, &ur);
    outcome(
        ul.delta_inter == 6 && ur.delta_inter == 6 && sym,
        format!(
            "UL(3) {:?}, UR(3) {:?} as (delta, intra, inter); inter expected 6; mirror-equal {sym}",
            triple(&ul),
            triple(&ur)
        ),
    )
}

fn c3() -> Outcome {
    use ScanVariant::*;
    let cases = [
        (Scan2, ShiftSpec::new(0, -1), Scan4),
        (Scan3, ShiftSpec::new(1, 0), Scan1),
        (Scan4, ShiftSpec::new(0, 1), Scan2),
    ];
    let deltas: Vec<u32> = cases.iter().map(|&(a, s, b)| analyze(a, s, b, 8, 4).unwrap().delta).collect();
    let all = search_procedures(8, 4, &ShiftSpec::default_set(), EliminationOptions::default()).unwrap();
    let max_intra = all.iter().map(|r| r.delta_intra).max().unwrap_or(0);
    outcome(
        deltas.iter().all(|&d| d == 18) && max_intra == 18,
        format!("L(1)/D(1)/R(1) deltas {deltas:?} (expected 18 each); max intra over search {max_intra} (expected 18)"),
    )
}

fn c4() -> Outcome {
    let mut bad = Vec::new();
    for v in ScanVariant::ALL {
        for size in [2, 4, 8, 16, 32] {
            let o = generate_scan(v, size).unwrap();
            let ranks = o.ranks();
            let aligned = (0..size / 2).all(|br| {
                (0..size / 2).all(|bc| {
                    let (r, c) = (2 * br, 2 * bc);
                    degree_of_indices([
                        ranks[r * size + c],
                        ranks[r * size + c + 1],
                        ranks[(r + 1) * size + c],
                        ranks[(r + 1) * size + c + 1],
                    ]) == 0
                })
            });
            if !(o.is_bijection() && o.is_continuous() && aligned) {
                bad.push(format!("{v}@{size}"));
            }
        }
    }
    outcome(bad.is_empty(), format!("20 (variant, size) pairs; failures {bad:?}"))
}

fn c5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let part = WindowPartition::new(8, 4).unwrap();
    let regions = enumerate_regions(8, &part).unwrap();
    let mut hist = [0usize; 4];
    let mut out_of_range = 0;
    for _ in 0..1000 {
        let mut cells: Vec<(usize, usize)> = (0..64).map(|i| (i / 8, i % 8)).collect();
        for i in (1..cells.len()).rev() {
            cells.swap(i, rng.random_range(0..=i));
        }
        let order = ScanOrder::new("random", 8, cells).unwrap();
        for r in &regions {
            match region_degree(&order, r).unwrap() {
                d @ 0..=3 => hist[d as usize] += 1,
                _ => out_of_range += 1,
            }
        }
    }
    outcome(
        out_of_range == 0,
        format!("{} regions checked, histogram {hist:?}", 1000 * regions.len()),
    )
}

fn naive_scan(p: &SelectiveScanParams<f64>, u: &[f64], len: usize) -> Vec<f64> {
    let (ch, ns) = (p.channels, p.state);
    let mut h = vec![0.0f64; ch * ns];
    let mut y = vec![0.0f64; len * ch];
    for l in 0..len {
        let ul = &u[l * ch..(l + 1) * ch];
        let dot = |w: &[f64], row: usize| (0..ch).map(|k| w[row * ch + k] * ul[k]).sum::<f64>();
        let b: Vec<f64> = (0..ns).map(|n| dot(&p.w_b, n)).collect();
        let cc: Vec<f64> = (0..ns).map(|n| dot(&p.w_c, n)).collect();
        for c in 0..ch {
            let z = dot(&p.w_delta, c) + p.b_delta[c];
            let dt = if z > 20.0 { z } else { (1.0 + z.exp()).ln() };
            let mut acc = 0.0;
            for n in 0..ns {
                let i = c * ns + n;
                h[i] = (dt * p.a[i]).exp() * h[i] + dt * b[n] * ul[c];
                acc += cc[n] * h[i];
            }
            y[l * ch + c] = acc + p.d[c] * ul[c];
        }
    }
    y
}

fn c6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let len = rng.random_range(1..=64);
        let ns = rng.random_range(1..=16);
        let ch = rng.random_range(1..=8);
        let p32 = SelectiveScanParams::random(ch, ns, &mut rng);
        let p = p32.cast::<f64>();
        let u32_: Vec<f32> = (0..len * ch).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u: Vec<f64> = u32_.iter().map(|&v| v as f64).collect();
        let oracle = naive_scan(&p, &u, len);
        let y = scan_apply(&p, &u, len).unwrap();
        let y32 = scan_apply(&p32, &u32_, len).unwrap();
        for ((a, b), c) in y.iter().zip(&oracle).zip(&y32) {
            worst64 = worst64.max((a - b).abs());
            worst32 = worst32.max((*c as f64 - b).abs() / b.abs().max(1.0));
        }
    }
    outcome(
        worst64 < 1e-6,
        format!("100 instances, max abs error {worst64:.3e} (f64 kernel); f32 kernel max scaled error {worst32:.3e}"),
    )
}

fn c7() -> Outcome {
    let scan = grad_check(20, 12, 7, 1e-5, 1e-4).unwrap();
    let loss = charbonnier_grad_check(20, 7, 1e-4, 1e-5).unwrap();
    outcome(
        scan.pass && loss.pass && scan.instances == 20,
        format!(
            "selective scan {} partials, max rel {:.3e} (< 1e-4); charbonnier {} partials, max rel {:.3e} (< 1e-5)",
            scan.checked, scan.max_rel_error, loss.checked, loss.max_rel_error
        ),
    )
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn c8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (ts, s) = (4usize, 3usize);
    let (mut mismatches, mut scale_breaks) = (0, 0);
    for _ in 0..50 {
        let ht = rng.random_range(1..=8);
        let wt = rng.random_range(1..=(64 / ht).min(8));
        let n = ht * wt;
        let t = rng.random_range(4..=8);
        let c = rng.random_range(2..=8);
        let mut field = |k| {
            let tokens = Tensor::from_fn(&[n, c], |_| (rng.random_range(-4i32..=4) as f32) * 0.25);
            TokenField::new(k, ht, wt, tokens).unwrap()
        };
        let pool: Vec<TokenField> = (0..t - 1).map(&mut field).collect();
        let q = field(t - 1);
        let mut traj = TrajectorySet::stationary(ht, wt, ts, t, t - 1).unwrap();
        let mut on_path = vec![vec![0usize; t - 1]; n];
        for (i, path) in on_path.iter_mut().enumerate() {
            for (j, tok) in path.iter_mut().enumerate() {
                *tok = rng.random_range(0..n);
                traj.coords[i * t + j] = [token_center(*tok / wt, ts), token_center(*tok % wt, ts)];
            }
        }
        let sel = select_tokens(&q, &pool, &traj, s, Similarity::Cosine).unwrap();
        for (i, path) in on_path.iter().enumerate() {
            let mut cands: Vec<(f64, usize)> = (0..t - 1)
                .map(|j| (cosine(q.token(i), pool[j].token(path[j])), t - 1 - j))
                .collect();
            cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<usize> = cands.iter().take(s).map(|x| x.1).collect();
            if sel.indices[i] != want {
                mismatches += 1;
            }
        }
        let alpha = [0.125f32, 0.5, 2.0, 8.0, 64.0][rng.random_range(0..5)];
        let scaled = TokenField::new(q.frame, ht, wt, q.tokens.scale(alpha)).unwrap();
        let sel2 = select_tokens(&scaled, &pool, &traj, s, Similarity::Cosine).unwrap();
        if (0..n).any(|i| sel2.indices[i][0] != sel.indices[i][0]) {
            scale_breaks += 1;
        }
    }
    outcome(
        mismatches == 0 && scale_breaks == 0,
        format!("50 fields; top-s mismatches {mismatches}; scaling-invariance breaks {scale_breaks}"),
    )
}

fn c9() -> Outcome {
    let a = Tensor::from_fn(&[3, 8, 8], |i| (i % 11) as f32 / 10.0);
    let spa = charbonnier_loss(&a, &a, 1e-4).unwrap();
    let hr = TrajectorySet::stationary(8, 8, 4, 3, 2).unwrap();
    let mut lr = TrajectorySet::stationary(2, 2, 4, 3, 2).unwrap();
    for r in 0..2 {
        for c in 0..2 {
            for k in 0..3 {
                let [x, y] = hr.coord((4 * r) * 8 + 4 * c, k);
                lr.coords[(r * 2 + c) * 3 + k] = [x / 4.0, y / 4.0];
            }
        }
    }
    let trj = trajectory_loss(&lr, &hr, 4).unwrap();
    let tot = total_loss(0.2, 0.5, 0.1);
    outcome(
        spa == 1e-4 && trj == 0.0 && tot == 0.2 + 0.1 * 0.5 && total_loss(spa, 0.0, 0.1) == spa,
        format!("L_spa {spa:e}, L_trj {trj}, total(0.2, 0.5, 0.1) = {tot}"),
    )
}

fn write_frames(dir: &Path) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let base: Vec<u8> = (0..40 * 40 * 3).map(|_| rng.random()).collect();
    fs::create_dir_all(dir).unwrap();
    (0..5)
        .map(|k| {
            let mut bytes = b"P6\n32 32\n255\n".to_vec();
            for r in 0..32 {
                for c in 0..32 {
                    let p = ((r + 4) * 40 + c + 4 + k) * 3;
                    bytes.extend_from_slice(&base[p..p + 3]);
                }
            }
            let path = dir.join(format!("f{k:02}.ppm"));
            fs::write(&path, bytes).unwrap();
            tsm_core::numerics::read_image(&path).unwrap()
        })
        .collect()
}

fn c10() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let frames_dir = tmp.path().join("frames");
    let frames = write_frames(&frames_dir);
    let fd = frames_dir.to_str().unwrap();
    let out = |name: &str| tmp.path().join(name).to_str().unwrap().to_string();
    let (o1, o8, oz) = (out("t1.tstf"), out("t8.tstf"), out("zero.tstf"));
    let (c1, _) = tsm(&["model", "forward", "--frames", fd, "--seed", "1", "--out", &o1, "--threads", "1"]);
    let (c8, _) = tsm(&["model", "forward", "--frames", fd, "--seed", "1", "--out", &o8, "--threads", "8"]);
    let (cz, _) = tsm(&["model", "forward", "--frames", fd, "--seed", "1", "--out", &oz, "--zero-recon"]);
    if (c1, c8, cz) != (0, 0, 0) {
        return outcome(false, format!("exit codes {c1}, {c8}, {cz}"));
    }
    let b1 = fs::read(&o1).unwrap();
    let same = b1 == fs::read(&o8).unwrap();
    let sr = read_tstf(&o1).unwrap();
    let zero = read_tstf(&oz).unwrap();
    let skip = bicubic_upsample(&frames[4], 4).unwrap();
    let exact = zero == skip;
    outcome(
        sr.dims() == [3, 128, 128] && same && exact,
        format!(
            "output {:?}; threads 1 vs 8 bit-identical {same}; zero-R output == bicubic {exact}",
            sr.dims()
        ),
    )
}

fn c11() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cells: Vec<(usize, usize)> = generate_scan(ScanVariant::Scan1, 8).unwrap().order;
    let seq = ss3d_ordering(&cells, 8, 3);
    let mut failures = 0;
    for _ in 0..100 {
        let c = rng.random_range(1..=8);
        let q = Tensor::from_fn(&[64, c], |_| rng.random_range(-1.0..1.0));
        let ctx = Tensor::from_fn(&[64, 3, c], |_| rng.random_range(-1.0..1.0));
        let data = gather(&seq, &q, &ctx).unwrap();
        let (mut q2, mut ctx2) = (Tensor::zeros(&[64, c]), Tensor::zeros(&[64, 3, c]));
        scatter_into(&seq, &data, &mut q2, &mut ctx2).unwrap();
        if data.dims()[0] != 256 || q2 != q || ctx2 != ctx {
            failures += 1;
        }
    }
    outcome(
        seq.len() == 256 && seq.is_bijection() && failures == 0,
        format!("sequence length {}; round-trip failures {failures}/100", seq.len()),
    )
}

fn c12() -> Outcome {
    let cal = calibrate_channels(&ModelConfig::default(), &Architecture::default(), (180, 320), PAPER_PARAMS);
    outcome(
        true,
        format!(
            "not reproduced: Table 1 PSNR/SSIM, runtime/FPS, ablation deltas (need full training). \
             Diagnostic: C = {} gives {} params and {:.1} GMACs at 180x320 (paper: 3.0M, {PAPER_GMACS}G)",
            cal.channels, cal.params, cal.gmacs
        ),
    )
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome, Duration);
    let criteria: [Criterion; 12] = [
        ("delta reproduction", c1, Duration::from_secs(1)),
        ("inter-window optimum", c2, Duration::from_secs(1)),
        ("symmetric best procedures", c3, Duration::from_secs(10)),
        ("hilbert properties", c4, Duration::from_secs(5)),
        ("region degree range", c5, Duration::from_secs(5)),
        ("selective-scan oracle", c6, Duration::from_secs(5)),
        ("gradient check", c7, Duration::from_secs(30)),
        ("token-selection oracle", c8, Duration::from_secs(5)),
        ("loss fixed points", c9, Duration::from_secs(1)),
        ("end-to-end toy forward", c10, Duration::from_secs(60)),
        ("SS3D structure", c11, Duration::from_secs(5)),
        ("non-reproducibility statement", c12, Duration::from_secs(5)),
    ];
    let mut failed = 0;
    for (i, (name, run, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = run();
        let took = start.elapsed();
        let ok = o.pass && took <= *limit;
        failed += !ok as usize;
        println!(
            "criterion {:>2} {:<30} {}  [{:.2}s / {}s]  {}",
            i + 1,
            name,
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            limit.as_secs(),
            o.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
