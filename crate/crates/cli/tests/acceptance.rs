//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs without the libtest harness so the lines print in
//! order as each check finishes.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdet_core::cells::{
    conv_gru_step, dense_gru_step, squeezed_gru_step, ConvGruWeights, DenseCellWeights, DenseGru, GruWeights,
    SqueezeFactorization,
};
use tdet_core::cost::{count_macs, count_params, CellConfig, CellKind};
use tdet_core::entropy::{histogram, ie_map, ie_map_with, unary_entropy, GrayImage, Histogram, IeOptions};
use tdet_core::io::encode_ppm;
use tdet_core::{Shape, Tensor};
use tdet_detect::ablation::{run_ablation, run_on, AblationTarget, ExperimentConfig};
use tdet_detect::checks::gradient_suite;
use tdet_detect::model::Placement;

use support::{open_ref, pair_entropy_ref, shift, window_means_ref};

/// Outcome of one criterion: pass flag and a one-line detail.
type Verdict = (bool, String);

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn c1_dense_params() -> Verdict {
    let lstm = count_params(&CellConfig::new(CellKind::DenseLstm, 1024, 1024, 1)).unwrap().total_params as f64;
    let gru = count_params(&CellConfig::new(CellKind::DenseGru, 1024, 1024, 1)).unwrap().total_params as f64;
    let (el, eg) = (rel(lstm, 8.41e6), rel(gru, 6.33e6));
    (
        el <= 0.01 && eg <= 0.01,
        format!("lstm {lstm} ({:.3}% off 8.41M), gru {gru} ({:.3}% off 6.33M), limit 1%", el * 100.0, eg * 100.0),
    )
}

fn c2_compression() -> Verdict {
    let p = |kind| count_params(&CellConfig::new(kind, 1024, 256, 3)).unwrap().total_params as f64;
    let squeezed = p(CellKind::SqueezedGru);
    let conv = p(CellKind::ConvGru);
    let dense = count_params(&CellConfig::new(CellKind::DenseGru, 1024, 1024, 1)).unwrap().total_params as f64;
    let (vs_dense, vs_conv) = (squeezed / dense, squeezed / conv);
    (
        vs_dense <= 0.20 && vs_conv <= 0.05,
        format!(
            "squeezed {squeezed} = {:.2}% of dense GRU {dense} (limit 20%), {:.2}% of convGRU {conv} (limit 5%)",
            vs_dense * 100.0,
            vs_conv * 100.0
        ),
    )
}

fn c3_macs() -> Verdict {
    let m = |kind| count_macs(&CellConfig::new(kind, 1024, 256, 3), (10, 10), 1).unwrap().total_macs as f64;
    let (sq, conv) = (m(CellKind::SqueezedGru), m(CellKind::ConvGru));
    let ratio = sq / conv;
    (
        sq < conv && ratio <= 0.25,
        format!("squeezed {sq} vs convGRU {conv} MACs at 10x10, ratio {ratio:.4} (limit 0.25)"),
    )
}

fn c4_entropy_oracles() -> Verdict {
    let start = Instant::now();
    let raw_opts = IeOptions {
        open: false,
        ..IeOptions::default()
    };
    let mut mismatches = 0;
    for seed in 0..100u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let img = GrayImage::new(8, 8, (0..64).map(|_| r.gen()).collect()).unwrap();
        let want = pair_entropy_ref(&window_means_ref(&img, 3), 8, 8, 3);
        if ie_map_with(&img, &raw_opts).unwrap().values() != want.as_slice() {
            mismatches += 1;
        }
        if ie_map(&img).unwrap().values() != open_ref(&want, 8, 8).as_slice() {
            mismatches += 1;
        }
    }
    let t = start.elapsed();
    (
        mismatches == 0 && t < Duration::from_secs(10),
        format!("{mismatches} mismatches over 100 images x 2 modes, {:.2}s (limit 10s)", t.as_secs_f64()),
    )
}

fn c5_entropy_bounds() -> Verdict {
    let constant = ie_map(&GrayImage::filled(12, 12, 90)).unwrap();
    let zero = constant.values().iter().all(|&v| v == 0.0);
    let max = (9f64).log2();
    let mut in_range = true;
    for seed in 0..20u64 {
        let mut r = ChaCha8Rng::seed_from_u64(500 + seed);
        let img = GrayImage::new(16, 16, (0..256).map(|_| r.gen_range(0..=255u8)).collect()).unwrap();
        let m = ie_map(&img).unwrap();
        in_range &= m.values().iter().all(|&v| (0.0..=max).contains(&v));
    }
    let uniform = unary_entropy(&Histogram::from_counts(&[1; 256]).unwrap());
    let ramp = GrayImage::new(16, 16, (0..=255).collect()).unwrap();
    let ramp_bits = unary_entropy(&histogram(&ramp).unwrap());
    (
        zero && in_range && uniform == 8.0 && ramp_bits == 8.0,
        format!("constant map zero: {zero}, values in [0, log2 9]: {in_range}, uniform-256 entropy {uniform} bits"),
    )
}

fn c6_gradients() -> Verdict {
    let start = Instant::now();
    let checks = gradient_suite(42).unwrap();
    let t = start.elapsed();
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.op.as_str()).collect();
    let few: Vec<&str> = checks.iter().filter(|c| c.shapes < 3).map(|c| c.op.as_str()).collect();
    let required = [
        "conv2d",
        "depthwise_conv",
        "pointwise_conv",
        "sigmoid",
        "tanh",
        "relu",
        "squeezed_gru_step",
        "conv_gru_step",
        "dense_gru_step",
        "dense_lstm_step",
        "feature_enhance",
        "ssd_loss",
    ];
    let missing: Vec<&str> = required.iter().copied().filter(|op| !checks.iter().any(|c| c.op == *op)).collect();
    (
        failed.is_empty() && few.is_empty() && missing.is_empty() && t < Duration::from_secs(60),
        format!(
            "{} ops, worst rel err {worst:.2e} (limit 1e-5), failed {failed:?}, under 3 shapes {few:?}, missing {missing:?}, {:.1}s (limit 60s)",
            checks.len(),
            t.as_secs_f64()
        ),
    )
}

fn c7_structure() -> Verdict {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    // 1x1 convGRU against a dense GRU applied pixel by pixel.
    let conv = ConvGruWeights::<f32>::random(5, 4, 1, &mut r).unwrap();
    let dense = DenseGru(DenseCellWeights {
        in_channels: 5,
        hidden: 4,
        matrices: conv.kernels.to_vec(),
        biases: conv.biases.to_vec(),
    });
    let x = Tensor::<f32>::uniform([1, 5, 6, 6], 1.0, &mut r);
    let h = Tensor::<f32>::uniform([1, 4, 6, 6], 1.0, &mut r);
    let out = conv_gru_step(&x, &h, &conv).unwrap();
    let mut dense_err = 0.0f64;
    for y in 0..6 {
        for px in 0..6 {
            let xv = Tensor::from_vec(Shape::vector(1, 5), (0..5).map(|c| x.at(0, c, y, px)).collect()).unwrap();
            let hv = Tensor::from_vec(Shape::vector(1, 4), (0..4).map(|c| h.at(0, c, y, px)).collect()).unwrap();
            let d = dense_gru_step(&xv, &hv, &dense).unwrap();
            for c in 0..4 {
                dense_err = dense_err.max((d.data()[c] - out.at(0, c, y, px)).abs() as f64);
            }
        }
    }

    // Zero weights: z = 1/2, candidate 0.
    let zero = GruWeights::<f64>::zeros(3, 4, 3, SqueezeFactorization::PerGate).unwrap();
    let xz = Tensor::<f64>::uniform([1, 3, 5, 5], 1.0, &mut r);
    let hz = Tensor::<f64>::uniform([1, 4, 5, 5], 1.0, &mut r);
    let half = squeezed_gru_step(&xz, &hz, &zero).unwrap() == hz.scale(0.5);

    // Shift both inputs; pixels 2+ from every border must move exactly.
    let w = GruWeights::<f64>::random(3, 4, 3, SqueezeFactorization::PerGate, &mut r).unwrap();
    let side = 10;
    let xs = Tensor::<f64>::uniform([1, 3, side, side], 1.0, &mut r);
    let hs = Tensor::<f64>::uniform([1, 4, side, side], 1.0, &mut r);
    let base = squeezed_gru_step(&xs, &hs, &w).unwrap();
    let mut equivariant = true;
    for (dy, dx) in [(1isize, 0isize), (0, -2), (2, 1)] {
        let moved = squeezed_gru_step(&shift(&xs, dy, dx), &shift(&hs, dy, dx), &w).unwrap();
        let inside = |v: isize| (2..side as isize - 2).contains(&v);
        for c in 0..4 {
            for y in 0..side as isize {
                for xx in 0..side as isize {
                    let (sy, sx) = (y - dy, xx - dx);
                    if inside(y) && inside(xx) && inside(sy) && inside(sx) {
                        equivariant &= moved.at(0, c, y as usize, xx as usize) == base.at(0, c, sy as usize, sx as usize);
                    }
                }
            }
        }
    }
    (
        dense_err <= 1e-6 && half && equivariant,
        format!("1x1 convGRU vs dense max diff {dense_err:.2e} (limit 1e-6), zero step = h/2: {half}, interior equivariance: {equivariant}"),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

const TOY_SEEDS: [u64; 3] = [0, 1, 2];

fn c8_toy_end_to_end() -> Verdict {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let splits = cfg.splits().unwrap();
    let variants = [
        ("baseline", Placement::None, Placement::None),
        ("ie", Placement::None, Placement::Stage(3)),
        ("gru+ie", Placement::Stage(3), Placement::Stage(3)),
    ];
    let mut maps = vec![Vec::new(); variants.len()];
    let mut recalls = vec![Vec::new(); variants.len()];
    for seed in TOY_SEEDS {
        for (i, (_, gru, ie)) in variants.iter().enumerate() {
            let mut train = cfg.train.clone();
            train.seed = seed;
            train.model.gru_placement = *gru;
            train.model.ie_placement = *ie;
            let r = run_on(&splits, &train, &cfg.eval).unwrap();
            maps[i].push(r.report.map);
            recalls[i].push(r.report.blurred_recall.unwrap_or(0.0));
        }
    }
    let t = start.elapsed();
    let med: Vec<f64> = maps.iter().cloned().map(median).collect();
    let (base, ie, both) = (med[0], med[1], med[2]);
    let recall_base = median(recalls[0].clone());
    let recall_both = median(recalls[2].clone());
    println!(
        "    per-seed mAP: baseline {:?}, ie {:?}, gru+ie {:?}",
        maps[0].iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
        maps[1].iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
        maps[2].iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()
    );
    println!("    median blurred-frame recall: baseline {recall_base:.4}, gru+ie {recall_both:.4}");
    (
        both >= base + 0.02 && ie >= base - 0.01 && t < Duration::from_secs(15 * 60),
        format!(
            "median mAP baseline {base:.4}, ie {ie:.4}, gru+ie {both:.4}; gain {:+.4} (need +0.02), ie change {:+.4} (floor -0.01); {} train / {} test clips, {:.0}s (limit 900s)",
            both - base,
            ie - base,
            cfg.train_sequences,
            cfg.test_sequences,
            t.as_secs_f64()
        ),
    )
}

/// Reduced-size run: the check is about the harness, not about accuracy.
fn small_experiment() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        train_sequences: 8,
        test_sequences: 4,
        ..ExperimentConfig::default()
    };
    cfg.train.epochs = 2;
    cfg
}

fn c9_ablation_parity() -> Verdict {
    let cfg = small_experiment();
    let table = run_ablation(&Placement::ALL, AblationTarget::Gru, &cfg).unwrap();
    let baseline = run_on(&cfg.splits().unwrap(), &cfg.train, &cfg.eval).unwrap();
    let rows_ok = table.rows.len() == Placement::ALL.len()
        && table.rows.iter().zip(Placement::ALL).all(|(r, p)| r.placement == p);
    let none = table.rows.iter().find(|r| r.placement == Placement::None).unwrap();
    let parity = none.map.to_bits() == baseline.report.map.to_bits();
    (
        rows_ok && parity,
        format!(
            "{} rows for {} placements, none row mAP {} vs standalone {} (bit-exact: {parity})",
            table.rows.len(),
            Placement::ALL.len(),
            none.map,
            baseline.report.map
        ),
    )
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn c10_cli_determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let pixels: Vec<u8> = (0..24 * 16 * 3).map(|_| r.gen_range(0..4u8) * 60).collect();
    fs::write(d.join("in.ppm"), encode_ppm(24, 16, &pixels)).unwrap();
    fs::write(
        d.join("toy.json"),
        r#"{"train_sequences": 4, "test_sequences": 2,
            "train": {"epochs": 1, "seq_len": 4, "model": {"gru_placement": "stage-3", "ie_placement": "stage-3"}}}"#,
    )
    .unwrap();
    let run = |argv: &[String]| {
        Command::new(env!("CARGO_BIN_EXE_tdet"))
            .args(argv)
            .current_dir(d)
            .env_remove("TDET_SEED")
            .output()
            .unwrap()
    };
    // A saved model for eval-toy to read.
    let setup = run(&["train-toy", "--config", "toy.json", "-o", "saved"].map(String::from));
    assert!(setup.status.success(), "{}", String::from_utf8_lossy(&setup.stderr));
    let commands: [&[&str]; 6] = [
        &["entropy", "in.ppm", "-o", "{out}/map.pgm", "--raw"],
        &["cost", "-o", "{out}/cost.csv"],
        &["gradcheck"],
        &["train-toy", "--config", "toy.json", "-o", "{out}/run"],
        &["eval-toy", "--model", "saved/model", "--config", "toy.json", "-o", "{out}/eval.json"],
        &["ablate", "--placements", "none,stage-4", "--config", "toy.json", "-o", "{out}/ablation"],
    ];
    let mut differing = Vec::new();
    for args in commands {
        let mut outputs = Vec::new();
        // Same output path both times, so printed paths match too.
        for _ in 0..2 {
            let out_dir = d.join("out");
            fs::create_dir_all(&out_dir).unwrap();
            let argv: Vec<String> = args.iter().map(|a| a.replace("{out}", "out")).collect();
            let out = run(&argv);
            if !out.status.success() {
                differing.push(format!("{} exited with {:?}", args[0], out.status.code()));
            }
            outputs.push((out.stdout, snapshot(&out_dir)));
            fs::remove_dir_all(&out_dir).unwrap();
        }
        if outputs[0] != outputs[1] {
            differing.push(args[0].to_string());
        }
    }
    (
        differing.is_empty(),
        format!("{} commands run twice each, differing: {differing:?}", commands.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("dense parameter counts", c1_dense_params),
        ("squeezed GRU compression", c2_compression),
        ("MACs ordering", c3_macs),
        ("entropy oracle equivalence", c4_entropy_oracles),
        ("entropy bounds and degenerate cases", c5_entropy_bounds),
        ("gradient verification", c6_gradients),
        ("structural equivalences", c7_structure),
        ("toy end-to-end", c8_toy_end_to_end),
        ("ablation harness parity", c9_ablation_parity),
        ("determinism", c10_cli_determinism),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let (ok, detail) = check();
        println!("{} criterion {n:>2} ({name}): {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
