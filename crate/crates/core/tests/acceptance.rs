//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use accent_audit::attack::{self, AttackConfig, AttackOutcome, Condition, ConditionSubspaces};
use accent_audit::config::AuditConfig;
use accent_audit::corpus::{self, CorpusConfig, Split, Utterance};
use accent_audit::intervention::{self, ApplyTo, InterventionConfig};
use accent_audit::metrics::{self, DisparityRow};
use accent_audit::model::ctc::{ctc_loss, log_softmax_rows};
use accent_audit::model::{mean_pool, Model, ModelConfig};
use accent_audit::pipeline::Audit;
use accent_audit::report::{self, AuditReport};
use accent_audit::subspace::{self, principal_angles, FitSpec, Method, Projector, Subspace};
use accent_audit::Error;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PUBLISHED_WERS: &str = "\
accent,clean,unconstrained,random,accent_subspace
African,27.1,38.0,34.3,34.2
Bermuda,30.9,46.4,42.6,44.9
Indian,40.7,56.7,54.1,56.3
Malaysia,39.8,58.1,51.1,52.6
Singapore,31.9,43.6,40.8,42.2
US,19.4,28.4,23.2,24.5
Wales,39.4,52.9,46.1,46.8
";

const MODEL_SEEDS: [Option<u64>; 3] = [None, Some(2), Some(3)];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

struct Run {
    audit: Audit,
    report: AuditReport,
    elapsed: Duration,
}

impl Run {
    fn new(root: &Path, name: &str, model_seed: Option<u64>) -> Run {
        let mut config = AuditConfig::default();
        config.output_dir = root.join(name);
        config.seeds.model = model_seed;
        let audit = Audit::new(config).unwrap();
        let start = Instant::now();
        let report = audit.full_audit().unwrap_or_else(|e| panic!("audit {name} failed: {e}"));
        Run {
            audit,
            report,
            elapsed: start.elapsed(),
        }
    }

    fn eval(&self) -> Vec<Utterance> {
        let utts = corpus::load_corpus(&self.audit.layout.manifest(), self.audit.config.corpus.sample_rate).unwrap();
        corpus::split_of(&utts, Split::Eval).into_iter().cloned().collect()
    }

    fn model(&self) -> Model {
        Model::load(&self.audit.layout.checkpoint()).unwrap()
    }

    fn subspace(&self, name: &str) -> Subspace {
        Subspace::load(&self.audit.layout.subspace(name)).unwrap()
    }

    fn outcomes(&self, condition: Condition) -> Vec<AttackOutcome> {
        let text = fs::read_to_string(self.audit.layout.outcomes(condition)).unwrap();
        text.lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    fn disparity(&self, column: &str) -> f64 {
        self.report.headline.disparity_pp[column]
    }
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let cols = report::read_wer_table(PUBLISHED_WERS).unwrap();
    let got: Vec<f64> = cols.iter().map(|(_, r)| r.disparity_pp).collect();
    let mut pass = got.iter().zip([21.3, 29.7, 30.9, 31.8]).all(|(g, w)| (g - w).abs() <= 0.05);

    let accents: Vec<String> = cols[0].1.per_accent_mean_wer.keys().cloned().collect();
    let clean: Vec<(String, f64)> = PUBLISHED_WERS
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].parse::<f64>().unwrap() / 100.0)
        })
        .collect();
    let means = metrics::per_accent_mean(clean.iter().map(|(a, v)| (a.as_str(), *v)), &accents).unwrap();
    let row = DisparityRow::from_means(means).unwrap();
    let mean = row.mean_wer * 100.0;
    pass &= (mean - 32.7).abs() <= 0.05 && (row.disparity_pp - 21.3).abs() <= 0.05;
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(1);
    verdict(
        pass,
        format!("disparities {got:.2?}, clean mean {mean:.2}, clean disparity {:.2}, {elapsed:?}", row.disparity_pp),
    )
}

fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, &c) in path.iter().enumerate() {
        if c != 0 && (i == 0 || path[i - 1] != c) {
            out.push(c);
        }
    }
    out
}

fn enumerated_nll(logits: &DMatrix<f64>, target: &[usize]) -> f64 {
    let (t_len, v) = logits.shape();
    let lp = log_softmax_rows(logits);
    let mut total = 0.0;
    let mut path = vec![0usize; t_len];
    for code in 0..v.pow(t_len as u32) {
        let mut c = code;
        for slot in path.iter_mut() {
            *slot = c % v;
            c /= v;
        }
        if collapse(&path) == target {
            total += path.iter().enumerate().map(|(t, &k)| lp[(t, k)]).sum::<f64>().exp();
        }
    }
    -total.ln()
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_loss = 0.0f64;
    let mut cases = 0;
    for t_len in 1..=4 {
        for v in 2..=3usize {
            let mut targets: Vec<Vec<usize>> = vec![vec![]];
            for a in 1..v {
                targets.push(vec![a]);
                for b in 1..v {
                    targets.push(vec![a, b]);
                }
            }
            for target in targets {
                let logits = DMatrix::from_fn(t_len, v, |_, _| rng.gen_range(-3.0..3.0));
                let oracle = enumerated_nll(&logits, &target);
                match ctc_loss(&logits, &target) {
                    Ok(loss) => worst_loss = worst_loss.max((loss - oracle).abs()),
                    Err(_) => assert!(oracle.is_infinite(), "feasible target rejected"),
                }
                cases += 1;
            }
        }
    }

    let model = Model::new(ModelConfig {
        seed: 11,
        ..ModelConfig::default()
    })
    .unwrap();
    let u = corpus::synthesize_utterance("fd", &[2, 5, 1], "acc2", "spk-fd", Split::Eval, &CorpusConfig::default()).unwrap();
    let wave = u.samples();
    let (_, grad) = model.objective_and_input_grad(&wave, &u.text, None).unwrap();
    let loss_at = |i: usize, shift: f64| {
        let mut w = wave.clone();
        w[i] += shift;
        model.ctc_loss(&w, &u.text).unwrap()
    };
    let mut worst_rel = 0.0f64;
    for _ in 0..20 {
        let i = rng.gen_range(0..wave.len());
        let h = 1e-4;
        let fd = (8.0 * (loss_at(i, h) - loss_at(i, -h)) - (loss_at(i, 2.0 * h) - loss_at(i, -2.0 * h))) / (12.0 * h);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
        worst_rel = worst_rel.max(rel);
    }
    let elapsed = start.elapsed();
    verdict(
        worst_loss < 1e-6 && worst_rel < 1e-4 && elapsed < Duration::from_secs(30),
        format!("{cases} lattices, max |loss − oracle| {worst_loss:.1e}, max rel. error vs 5-point central FD (h=1e-4) {worst_rel:.1e}, {elapsed:?}"),
    )
}

fn edit_script_oracle(a: &[u8], b: &[u8]) -> usize {
    match (a.split_last(), b.split_last()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = edit_script_oracle(ra, rb) + usize::from(x != y);
            let del = edit_script_oracle(ra, b) + 1;
            let ins = edit_script_oracle(a, rb) + 1;
            sub.min(del).min(ins)
        }
    }
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for _ in 0..200 {
        let hyp: Vec<u8> = (0..rng.gen_range(0..=6)).map(|_| rng.gen_range(0..4)).collect();
        let reference: Vec<u8> = (0..rng.gen_range(1..=6)).map(|_| rng.gen_range(0..4)).collect();
        let oracle = edit_script_oracle(&hyp, &reference) as f64 / reference.len() as f64;
        if metrics::wer(&hyp, &reference).unwrap() != oracle {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        mismatches == 0 && elapsed < Duration::from_secs(10),
        format!("{mismatches} mismatches over 200 pairs, {elapsed:?}"),
    )
}

fn subspace_errors(basis: &DMatrix<f64>) -> (f64, f64) {
    (
        subspace::orthonormality_error(basis),
        Projector::new(basis).idempotency_error(),
    )
}

fn criterion_4(runs: &[Run]) -> Verdict {
    let mut worst = (0.0f64, 0.0f64);
    let mut fitted = 0;
    let mut bases: Vec<DMatrix<f64>> = Vec::new();
    for run in runs {
        for name in ["accent", "random", "permuted"] {
            bases.push(run.subspace(name).basis);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = DMatrix::from_fn(140, 16, |r, c| rng.gen_range(-1.0..1.0) + if c < 3 { (r % 7) as f64 * 0.3 } else { 0.0 });
    let labels: Vec<usize> = (0..140).map(|r| r % 7).collect();
    for method in [Method::CentroidDiff, Method::Ridge, Method::Lda, Method::LinearProbe] {
        for k in [1, 3, 6, 9] {
            match subspace::fit_basis(&x, &labels, 7, &FitSpec::new(method, k)) {
                Ok(b) => bases.push(b),
                Err(Error::RankDeficient { .. }) if k > 6 && matches!(method, Method::CentroidDiff | Method::Lda) => {}
                Err(e) => panic!("{method:?} k={k}: {e}"),
            }
        }
    }
    for b in &bases {
        let (o, p) = subspace_errors(b);
        worst = (worst.0.max(o), worst.1.max(p));
        fitted += 1;
    }
    let self_angle = bases
        .iter()
        .flat_map(|b| principal_angles(b, b).unwrap())
        .fold(0.0f64, |m, a| m.max(a.abs()));
    let e1 = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
    let e2 = DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 1.0]);
    let ortho = principal_angles(&e1, &e2).unwrap()[0];
    verdict(
        worst.0 < 1e-8 && worst.1 < 1e-8 && self_angle < 1e-6 && (ortho - 90.0).abs() < 1e-6,
        format!(
            "{fitted} bases, max ‖UᵀU − I‖ {:.1e}, max ‖P² − P‖ {:.1e}, max self-angle {self_angle:.1e}°, orthogonal pair {ortho:.6}°",
            worst.0, worst.1
        ),
    )
}

fn criterion_5(run: &Run) -> Verdict {
    let h = &run.report.headline;
    let clean = &run.report.wer_table["clean"];
    let per: Vec<String> = clean
        .per_accent_mean_wer
        .iter()
        .map(|(a, v)| format!("{a} {:.1}", v * 100.0))
        .collect();
    verdict(
        h.clean_disparity_pp > 5.0 && h.reference_accent_lowest,
        format!(
            "clean disparity {:.1} pp, reference lowest: {}, per-accent [{}], training {} epochs",
            h.clean_disparity_pp,
            h.reference_accent_lowest,
            per.join(", "),
            run.report.training.epochs_run
        ),
    )
}

fn criterion_6(runs: &[Run]) -> Verdict {
    let ratios: Vec<f64> = runs.iter().map(|r| r.report.headline.coupling_ratio).collect();
    verdict(ratios[0] >= 1.5, format!("accent/random coupling ratio {:.2} (all seeds {ratios:.2?})", ratios[0]))
}

fn criterion_7(runs: &[Run]) -> Verdict {
    let median = |column: &str| metrics::median(&runs.iter().map(|r| r.disparity(column)).collect::<Vec<_>>()).unwrap();
    let (clean, accent, random) = (median("clean"), median("accent_subspace"), median("random"));
    let gaps: Vec<f64> = runs.iter().map(|r| r.report.headline.accent_gap_pp).collect();
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    verdict(
        clean < accent && accent >= random && mean_gap > 0.0,
        format!(
            "median disparity clean {clean:.1} / accent {accent:.1} / random {random:.1} pp; accent − random per-accent gap {mean_gap:+.2} pp (per seed {gaps:+.2?})"
        ),
    )
}

fn criterion_8(runs: &[Run]) -> Verdict {
    let chance = 1.0 / runs[0].audit.config.corpus.n_accents as f64;
    let n = runs[0].audit.config.corpus.n_accents;
    let mut pass = true;
    let mut parts = Vec::new();
    for r in runs {
        let h = &r.report.headline;
        let acc = r.report.subspace.permuted_eval_probe_accuracy;
        pass &= h.permuted_gap_pp < h.accent_gap_pp;
        pass &= h.permuted_gap_positive > 0 && h.permuted_gap_positive < n;
        pass &= (acc - chance).abs() <= 0.1;
        parts.push(format!(
            "perm {:+.2} ({}/{n} positive) vs real {:+.2}, perm probe {acc:.2}",
            h.permuted_gap_pp, h.permuted_gap_positive, h.accent_gap_pp
        ));
    }
    verdict(pass, parts.join("; "))
}

fn criterion_9(runs: &[Run]) -> Verdict {
    let mut worst_excess = f64::NEG_INFINITY;
    let mut worst_sample = 0.0f64;
    let mut checked = 0;
    for r in runs {
        let eval: BTreeMap<String, Utterance> = r.eval().into_iter().map(|u| (u.id.clone(), u)).collect();
        for condition in Condition::ALL {
            for o in r.outcomes(condition) {
                worst_excess = worst_excess.max(o.delta_l2 - o.epsilon);
                worst_sample = worst_sample.max(o.max_abs_sample);
                checked += 1;
            }
        }
        for (id, u) in &eval {
            let path = r.audit.layout.attacked_audio(id);
            let adv = accent_audit::io::read_f32le(&path).unwrap();
            let d = adv
                .iter()
                .zip(&u.waveform)
                .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            worst_excess = worst_excess.max(d - r.audit.config.attack.epsilon);
            worst_sample = worst_sample.max(adv.iter().fold(0.0f64, |m, v| m.max(v.abs() as f64)));
        }
    }

    let run = &runs[0];
    let model = run.model();
    let eval = run.eval();
    let sample: Vec<&Utterance> = eval.iter().step_by(10).collect();
    let (a, rnd, p) = (run.subspace("accent"), run.subspace("random"), run.subspace("permuted"));
    let subs = ConditionSubspaces {
        accent: &a,
        random: &rnd,
        permuted: &p,
    };
    let config = AttackConfig {
        steps: 5,
        ..run.audit.config.attack.clone()
    };
    let mut zero_mismatch = 0;
    for condition in [Condition::Unconstrained, Condition::Random, Condition::Accent, Condition::Permuted] {
        let outcomes = attack::run_condition(&model, &sample, condition, &config, 0.0, &subs)
            .unwrap()
            .into_complete()
            .unwrap();
        zero_mismatch += outcomes
            .iter()
            .filter(|o| o.attacked_wer != o.clean_wer || o.delta_l2 != 0.0)
            .count();
    }
    verdict(
        worst_excess <= 1e-6 && worst_sample <= 1.0 && zero_mismatch == 0,
        format!(
            "{checked} outcomes, max ‖δ‖ − ε {worst_excess:.2e}, max |sample| {worst_sample:.4}, ε=0 mismatches {zero_mismatch}/{}",
            sample.len() * 4
        ),
    )
}

fn criterion_10(runs: &[Run]) -> Verdict {
    let mut holds = 0;
    let mut parts = Vec::new();
    for r in runs {
        let gaps = &r.report.headline.sweep_disparity_gap_pp;
        let (first, last) = (gaps.first().unwrap(), gaps.last().unwrap());
        if last.1 >= first.1 {
            holds += 1;
        }
        parts.push(format!("ε {} → {}: {:+.1} → {:+.1} pp", first.0, last.0, first.1, last.1));
    }
    verdict(holds >= 2, format!("{holds}/3 seeds; {}", parts.join("; ")))
}

fn criterion_11(runs: &[Run]) -> Verdict {
    let changes: Vec<f64> = runs
        .iter()
        .map(|r| r.report.headline.intervention.clean_disparity_change_pp)
        .collect();
    let alphas_ok = runs.iter().all(|r| r.report.intervention.alpha == 0.5);
    let mut pass = alphas_ok && changes.iter().all(|&c| c >= -0.5);

    let run = &runs[0];
    let model = run.model();
    let accent = run.subspace("accent");
    let full = InterventionConfig {
        alpha: 1.0,
        apply_to: ApplyTo::PerFrame,
    };
    let mut worst = 0.0f64;
    for u in run.eval().iter().step_by(25) {
        let states = model.forward(&u.samples()).unwrap();
        let h = states.layer(accent.layer).unwrap();
        let e = intervention::project_out(h, &accent.basis, 1.0, ApplyTo::PerFrame).unwrap();
        for row in e.row_iter() {
            let v = row.transpose();
            worst = worst.max((accent.basis.transpose() * &v).norm() / v.norm().max(f64::MIN_POSITIVE));
        }
        let pooled = intervention::project_out(h, &accent.basis, 1.0, ApplyTo::PooledEquivalent).unwrap();
        let m = mean_pool(&pooled);
        worst = worst.max((accent.basis.transpose() * &m).norm() / m.norm().max(f64::MIN_POSITIVE));
        let hooked = intervention::forward_with_hook(&model, &u.samples(), &accent, &full).unwrap();
        let m = mean_pool(hooked.layer(accent.layer).unwrap());
        worst = worst.max((accent.basis.transpose() * &m).norm() / m.norm().max(f64::MIN_POSITIVE));
    }
    pass &= worst < 1e-6;
    verdict(
        pass,
        format!("clean disparity change at α=0.5 per seed {changes:+.2?} pp; α=1 max ‖Uᵀe′‖/‖e′‖ {worst:.1e}"),
    )
}

fn criterion_12(first: &Run, again: &Run) -> Verdict {
    let a = fs::read(first.audit.layout.report()).unwrap();
    let b = fs::read(again.audit.layout.report()).unwrap();
    let limit = Duration::from_secs(600);
    verdict(
        a == b && again.elapsed < limit,
        format!(
            "report.json identical: {} ({} bytes); full audit {:.0?} (first run {:.0?})",
            a == b,
            a.len(),
            again.elapsed,
            first.elapsed
        ),
    )
}

fn guarded(check: impl FnOnce() -> Verdict) -> Verdict {
    panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("check panicked: {msg}"))
    })
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let mut results: Vec<(usize, Verdict)> = vec![
        (1, guarded(criterion_1)),
        (2, guarded(criterion_2)),
        (3, guarded(criterion_3)),
    ];

    let runs: Vec<Run> = MODEL_SEEDS
        .iter()
        .enumerate()
        .map(|(i, &seed)| Run::new(dir.path(), &format!("seed{}", i + 1), seed))
        .collect();
    let again = Run::new(dir.path(), "repeat", MODEL_SEEDS[0]);

    results.push((4, guarded(|| criterion_4(&runs))));
    results.push((5, guarded(|| criterion_5(&runs[0]))));
    results.push((6, guarded(|| criterion_6(&runs))));
    results.push((7, guarded(|| criterion_7(&runs))));
    results.push((8, guarded(|| criterion_8(&runs))));
    results.push((9, guarded(|| criterion_9(&runs))));
    results.push((10, guarded(|| criterion_10(&runs))));
    results.push((11, guarded(|| criterion_11(&runs))));
    results.push((12, guarded(|| criterion_12(&runs[0], &again))));

    let failed: Vec<usize> = results.iter().filter(|(_, v)| !v.pass).map(|(n, _)| *n).collect();
    for (n, v) in &results {
        println!("criterion {n:>2}: {} {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
