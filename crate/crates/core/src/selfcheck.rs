//! Runtime verification suite behind `avdd selfcheck`: gradient checks for
//! every primitive and for the full objective, the loss-term oracles, the
//! attention and metric invariants, and the MFCC sanity cases. An optional
//! injected gradient fault lets callers confirm the checks actually catch a
//! corrupted backward pass.

use crate::audio::{self, AudioClip, MelFilterbank, MfccConfig};
use crate::data::SequenceBatch;
use crate::losses;
use crate::metrics::{self, ScoreSet, ScoredVideo};
use crate::model::{self, ForwardCtx, ModelArch, ModelParams, SubspaceMode};
use crate::optim::{clip_grad_norm, AdamState};
use crate::tape::{finite_diff_check, GradFault, Tape};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name,
        passed,
        detail,
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(
        vec![r, c],
        (0..r * c).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .expect("dims positive")
}

/// Run the whole suite. `fault` is forwarded into the gradient-check tapes;
/// a non-trivial fault must make the gradient checks fail.
pub fn run(fault: Option<GradFault>) -> Vec<CheckResult> {
    let mut out = Vec::new();
    out.push(primitive_gradients(fault.clone()));
    out.push(full_loss_gradients(fault));
    out.push(cmd_cases());
    out.push(orthogonality_cases());
    out.push(attention_cases());
    out.push(metrics_cases());
    out.push(mfcc_cases());
    out.push(optimizer_cases());
    out
}

fn primitive_gradients(fault: Option<GradFault>) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for trial in 0..10 {
        let a = rand_tensor(&mut rng, 3, 4, -1.0, 1.0);
        let b = rand_tensor(&mut rng, 4, 3, -1.0, 1.0);
        let fault = fault.clone();
        let res = finite_diff_check(
            move |tape, vars| {
                tape.set_fault(fault.clone());
                let m = tape.matmul(vars[0], vars[1])?;
                let t = tape.tanh(m);
                let s = tape.sigmoid(t);
                let sm = tape.softmax_rows(s)?;
                let r = tape.relu(vars[0]);
                let rs = tape.row_sum(r)?;
                let ms = tape.sum_squares(rs);
                let total = tape.sum_squares(sm);
                tape.add(total, ms)
            },
            &[a, b],
            1e-5,
        );
        match res {
            Ok(err) => worst = worst.max(err),
            Err(e) => return check("gradients/primitives", false, format!("trial {trial}: {e}")),
        }
    }
    check(
        "gradients/primitives",
        worst < 1e-3,
        format!("max relative error {worst:.3e} over 10 random configurations"),
    )
}

fn full_loss_gradients(fault: Option<GradFault>) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let arch = ModelArch {
        d_audio: 3,
        d_visual: 4,
        hidden: 6,
        heads: 2,
        head_hidden: 8,
        subspace_mode: SubspaceMode::Full,
    };
    let params = match ModelParams::init(arch, &mut rng) {
        Ok(p) => p,
        Err(e) => return check("gradients/full-loss", false, e.to_string()),
    };
    let batch = SequenceBatch {
        x_audio: rand_tensor(&mut rng, 4, 3, -1.0, 1.0)
            .reshaped(vec![2, 2, 3]),
        x_visual: rand_tensor(&mut rng, 4, 4, -1.0, 1.0).reshaped(vec![2, 2, 4]),
        labels: vec![1.0, 0.0],
        video_ids: vec!["a".into(), "b".into()],
    };
    let tensors: Vec<Tensor> = params
        .named_tensors()
        .iter()
        .map(|(_, t)| (*t).clone())
        .collect();
    let weights = losses::LossWeights::default();
    let res = finite_diff_check(
        move |tape, vars| {
            tape.set_fault(fault.clone());
            // The checked leaves are the parameters in canonical order;
            // view them as a parameter binding and run the full forward.
            let vars_struct = model::ModelVars::from_order(
                vars.to_vec(),
                params.arch.clone(),
                params.spec_a.is_some(),
                params.shared_enc.is_some(),
            );
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let mut ctx = ForwardCtx::eval(&mut r);
            let (reps, _, y_hat) =
                model::forward(tape, &vars_struct, &batch, &mut ctx).map_err(flatten_err)?;
            let (total, _) = losses::combined_loss(tape, &reps, y_hat, &batch.labels, &weights)
                .map_err(flatten_err)?;
            Ok(total)
        },
        &tensors,
        1e-5,
    );
    match res {
        Ok(err) => check(
            "gradients/full-loss",
            err < 1e-3,
            format!("max relative error {err:.3e} on the combined objective"),
        ),
        Err(e) => check("gradients/full-loss", false, e.to_string()),
    }
}

fn flatten_err<E: std::fmt::Display>(e: E) -> crate::tape::TapeError {
    crate::tape::TapeError::InvalidArg {
        op: "forward",
        msg: e.to_string(),
    }
}

fn cmd_cases() -> CheckResult {
    let mut tape = Tape::new();
    let x = Tensor::from_rows(&[vec![0.0], vec![0.5], vec![1.0]]).unwrap();
    let y = Tensor::from_rows(&[vec![0.25], vec![0.5], vec![0.75]]).unwrap();
    let xv = tape.constant(&x);
    let yv = tape.constant(&y);
    let self_zero = match losses::cmd(&mut tape, xv, xv, 5) {
        Ok(v) => tape.scalar_value(v),
        Err(e) => return check("losses/cmd", false, e.to_string()),
    };
    let worked = match losses::cmd(&mut tape, xv, yv, 5) {
        Ok(v) => tape.scalar_value(v),
        Err(e) => return check("losses/cmd", false, e.to_string()),
    };
    let swapped = match losses::cmd(&mut tape, yv, xv, 5) {
        Ok(v) => tape.scalar_value(v),
        Err(e) => return check("losses/cmd", false, e.to_string()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut sym_ok = true;
    for _ in 0..100 {
        let a = rand_tensor(&mut rng, 3, 2, -2.0, 2.0);
        let b = rand_tensor(&mut rng, 4, 2, -2.0, 2.0);
        let av = tape.constant(&a);
        let bv = tape.constant(&b);
        let fwd = losses::cmd(&mut tape, av, bv, 5).unwrap();
        let rev = losses::cmd(&mut tape, bv, av, 5).unwrap();
        let f = tape.scalar_value(fwd);
        let r = tape.scalar_value(rev);
        if f < 0.0 || (f - r).abs() > 1e-9 {
            sym_ok = false;
        }
    }
    let passed = self_zero == 0.0 && (worked - 0.1640625).abs() < 1e-5 && swapped == worked && sym_ok;
    check(
        "losses/cmd",
        passed,
        format!("self {self_zero:e}, worked {worked:.6} (want 0.16406), symmetric over 100 pairs: {sym_ok}"),
    )
}

fn orthogonality_cases() -> CheckResult {
    let mut tape = Tape::new();
    let e1 = tape.constant(&Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
    let e2 = tape.constant(&Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap());
    let ortho = losses::orthogonality_loss(&mut tape, Some(e1), Some(e2), Some(e2), Some(e1))
        .map(|v| tape.scalar_value(v));
    let u = tape.constant(&Tensor::from_rows(&[vec![0.6, 0.8]]).unwrap());
    let same = losses::orthogonality_loss(&mut tape, Some(u), Some(u), Some(u), Some(u))
        .map(|v| tape.scalar_value(v));
    let d = tape.constant(&Tensor::from_rows(&[vec![1.2, 1.6]]).unwrap());
    let doubled = losses::orthogonality_loss(&mut tape, Some(d), Some(u), Some(u), Some(u))
        .map(|v| tape.scalar_value(v));
    match (ortho, same, doubled) {
        (Ok(o), Ok(s), Ok(db)) => {
            let passed = o.abs() <= 1e-12 && (s - 4.0).abs() <= 1e-12 && (db - s).abs() <= 1e-12;
            check(
                "losses/orthogonality",
                passed,
                format!("orthogonal {o:e}, identical {s}, scale-invariance delta {:e}", db - s),
            )
        }
        _ => check("losses/orthogonality", false, "evaluation failed".into()),
    }
}

fn attention_cases() -> CheckResult {
    let d = 4usize;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let arch = ModelArch {
        d_audio: 2,
        d_visual: 2,
        hidden: d,
        heads: 1,
        head_hidden: 4,
        subspace_mode: SubspaceMode::Full,
    };
    let mut params = match ModelParams::init(arch, &mut rng) {
        Ok(p) => p,
        Err(e) => return check("model/attention", false, e.to_string()),
    };
    let mut eye = Tensor::zeros(vec![d, d]);
    for i in 0..d {
        eye.data_mut()[i * d + i] = 1.0;
    }
    params.attn.heads[0].w_q = eye.clone();
    params.attn.heads[0].w_k = eye.clone();
    params.attn.heads[0].w_v = eye.clone();
    params.attn.w_o = eye;

    // One dominant row, scaled by 100; the other rows align positively with
    // it so the saturated softmax sends every row to the dominant one.
    let dominant = vec![100.0, 60.0, 80.0, 120.0];
    let rows = [
        dominant.clone(),
        vec![0.3, 0.1, 0.4, 0.2],
        vec![0.2, 0.5, 0.1, 0.4],
        vec![0.1, 0.1, 0.3, 0.2],
    ];
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let reps_vars: Vec<_> = rows
        .iter()
        .map(|r| tape.constant(&Tensor::from_rows(&[r.clone()]).unwrap()))
        .collect();
    let reps = model::SubspaceReps {
        u_a: reps_vars[0],
        u_v: reps_vars[1],
        h_a: Some(reps_vars[0]),
        h_v: Some(reps_vars[1]),
        g_a: Some(reps_vars[2]),
        g_v: Some(reps_vars[3]),
        recon_a: reps_vars[0],
        recon_v: reps_vars[1],
    };
    let out = match model::attention_fuse(&mut tape, &vars, &reps) {
        Ok(o) => o,
        Err(e) => return check("model/attention", false, e.to_string()),
    };

    // Row-stochastic attention weights.
    let mut rows_ok = true;
    for &w in &out.weights {
        let c = tape.shape(w)[1];
        for i in 0..tape.shape(w)[0] {
            let s: f64 = tape.data(w)[i * c..(i + 1) * c].iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                rows_ok = false;
            }
        }
    }

    // Direct evaluation of softmax(M M^T / sqrt(d)) M with plain loops.
    let scale = 1.0 / (d as f64).sqrt();
    let mut oracle = vec![vec![0.0f64; d]; 4];
    for r in 0..4 {
        let mut logits = [0.0f64; 4];
        for c in 0..4 {
            logits[c] = rows[r].iter().zip(&rows[c]).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for c in 0..4 {
            for j in 0..d {
                oracle[r][j] += exps[c] / z * rows[c][j];
            }
        }
    }
    let fused = tape.data(out.fused);
    let mut oracle_ok = true;
    for r in 0..4 {
        for j in 0..d {
            if (fused[r * d + j] - oracle[r][j]).abs() > 1e-9 {
                oracle_ok = false;
            }
        }
    }
    let dom_norm = dominant.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut dominant_ok = true;
    for r in 0..4 {
        for j in 0..d {
            if (fused[r * d + j] - dominant[j]).abs() > 1e-2 * dom_norm {
                dominant_ok = false;
            }
        }
    }

    // Zero query/key: uniform attention equals the mean of the rows.
    params.attn.heads[0].w_q = Tensor::zeros(vec![d, d]);
    params.attn.heads[0].w_k = Tensor::zeros(vec![d, d]);
    let mut tape2 = Tape::new();
    let vars2 = params.bind(&mut tape2, false);
    let reps_vars2: Vec<_> = rows
        .iter()
        .map(|r| tape2.constant(&Tensor::from_rows(&[r.clone()]).unwrap()))
        .collect();
    let reps2 = model::SubspaceReps {
        u_a: reps_vars2[0],
        u_v: reps_vars2[1],
        h_a: Some(reps_vars2[0]),
        h_v: Some(reps_vars2[1]),
        g_a: Some(reps_vars2[2]),
        g_v: Some(reps_vars2[3]),
        recon_a: reps_vars2[0],
        recon_v: reps_vars2[1],
    };
    let out2 = match model::attention_fuse(&mut tape2, &vars2, &reps2) {
        Ok(o) => o,
        Err(e) => return check("model/attention", false, e.to_string()),
    };
    let mean: Vec<f64> = (0..d)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / 4.0)
        .collect();
    let fused2 = tape2.data(out2.fused);
    let mut uniform_ok = true;
    for r in 0..4 {
        for j in 0..d {
            if (fused2[r * d + j] - mean[j]).abs() > 1e-9 {
                uniform_ok = false;
            }
        }
    }
    check(
        "model/attention",
        rows_ok && oracle_ok && dominant_ok && uniform_ok,
        format!(
            "row-stochastic {rows_ok}, direct-eval oracle {oracle_ok}, dominant-row {dominant_ok}, uniform degenerate {uniform_ok}"
        ),
    )
}

fn metrics_cases() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut mw_ok = true;
    for _ in 0..100 {
        let n_pos = rng.random_range(1..25usize);
        let n_neg = rng.random_range(1..25usize);
        let mut entries = Vec::new();
        for i in 0..n_pos {
            entries.push(ScoredVideo {
                video_id: format!("p{i}"),
                score: (rng.random_range(0..25) as f64) / 25.0,
                label: 1,
            });
        }
        for i in 0..n_neg {
            entries.push(ScoredVideo {
                video_id: format!("n{i}"),
                score: (rng.random_range(0..25) as f64) / 25.0,
                label: 0,
            });
        }
        let s = ScoreSet::new(entries);
        let roc = metrics::roc_curve(&s).unwrap();
        let auc = metrics::auc(&roc);
        let mut wins = 0.0;
        let mut total = 0.0;
        for p in s.entries.iter().filter(|e| e.label == 1) {
            for n in s.entries.iter().filter(|e| e.label == 0) {
                total += 1.0;
                if p.score > n.score {
                    wins += 1.0;
                } else if p.score == n.score {
                    wins += 0.5;
                }
            }
        }
        if (auc - wins / total).abs() > 1e-9 {
            mw_ok = false;
        }
        if (metrics::pauc(&roc, 1.0) - auc).abs() > 1e-12 {
            mw_ok = false;
        }
    }
    let worked = ScoreSet::new(vec![
        ScoredVideo { video_id: "f1".into(), score: 0.9, label: 1 },
        ScoredVideo { video_id: "f2".into(), score: 0.4, label: 1 },
        ScoredVideo { video_id: "r1".into(), score: 0.4, label: 0 },
        ScoredVideo { video_id: "r2".into(), score: 0.1, label: 0 },
    ]);
    let roc = metrics::roc_curve(&worked).unwrap();
    let eer = metrics::eer(&roc);
    let auc = metrics::auc(&roc);
    let passed = mw_ok && (eer - 0.25).abs() < 1e-9 && (auc - 0.875).abs() < 1e-9;
    check(
        "metrics/roc",
        passed,
        format!("Mann-Whitney parity over 100 sets: {mw_ok}; worked set auc {auc}, eer {eer}"),
    )
}

fn mfcc_cases() -> CheckResult {
    let cfg = MfccConfig::default();
    let sr = 16000u32;
    let silence = AudioClip {
        sample_rate: sr,
        samples: vec![0.0; 1600],
    };
    let series = match audio::mfcc(&silence, &cfg) {
        Ok(s) => s,
        Err(e) => return check("audio/mfcc", false, e.to_string()),
    };
    let bank = MelFilterbank::new(sr, &cfg).unwrap();
    let expected_log: Vec<f64> = bank
        .row_sums()
        .iter()
        .map(|&s| (audio::LOG_FLOOR * s).ln())
        .collect();
    let mut silence_ok = true;
    for f in 0..series.frames.rows() {
        for k in 0..cfg.num_coeffs {
            let want = audio::dct2_coefficient(&expected_log, k);
            if (series.frames.at2(f, k) - want).abs() > 1e-9 {
                silence_ok = false;
            }
        }
    }

    let tone: Vec<f64> = (0..4800)
        .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / sr as f64).sin())
        .collect();
    let clip = AudioClip {
        sample_rate: sr,
        samples: tone,
    };
    let log_mels = match audio::log_mel_energies(&clip, &cfg) {
        Ok(m) => m,
        Err(e) => return check("audio/mfcc", false, e.to_string()),
    };
    let nearest = bank
        .centers_hz
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - 440.0).abs().partial_cmp(&(b.1 - 440.0).abs()).unwrap())
        .unwrap()
        .0;
    let mut tone_ok = true;
    for f in 0..log_mels.rows() {
        let row = &log_mels.data()[f * cfg.num_mels..(f + 1) * cfg.num_mels];
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if argmax != nearest {
            tone_ok = false;
        }
    }

    let mut counts_ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for _ in 0..10 {
        let n = rng.random_range(400..32000usize);
        let clip = AudioClip {
            sample_rate: sr,
            samples: vec![0.1; n],
        };
        let frames = audio::frame_and_window(&clip).unwrap();
        if frames.rows() != (n - 400) / 160 + 1 {
            counts_ok = false;
        }
    }
    check(
        "audio/mfcc",
        silence_ok && tone_ok && counts_ok,
        format!("silence constant {silence_ok}, 440 Hz argmax {tone_ok}, frame arithmetic {counts_ok}"),
    )
}

fn optimizer_cases() -> CheckResult {
    // Convergence of Adam on a scalar quadratic.
    let mut w = Tensor::new(vec![1], vec![0.0]).unwrap();
    let mut adam = AdamState::new(0.1, 1.0);
    for _ in 0..200 {
        let g = 2.0 * (w.data()[0] - 3.0);
        w.set_grad(vec![g]).unwrap();
        if adam.step(&mut [&mut w]).is_err() {
            return check("optim/adam", false, "step failed".into());
        }
    }
    let converged = (w.data()[0] - 3.0).abs() < 0.05;

    // Clip idempotence and exactness.
    let mut t = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
    t.set_grad(vec![3.0, 4.0]).unwrap();
    let f1 = clip_grad_norm(&mut [&mut t], 1.0).unwrap();
    let once = t.grad().unwrap().to_vec();
    let f2 = clip_grad_norm(&mut [&mut t], 1.0).unwrap();
    let clip_ok = (f1 - 0.2).abs() < 1e-12
        && f2 == 1.0
        && t.grad().unwrap() == &once[..]
        && (once[0] - 0.6).abs() < 1e-12;
    check(
        "optim/adam",
        converged && clip_ok,
        format!("adam converged to {:.4}, clip idempotent {clip_ok}", w.data()[0]),
    )
}
