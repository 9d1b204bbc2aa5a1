//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if a required check fails. Criteria 7 and 10 train the default
//! desk-scale models and run the CLI pipeline end to end (several minutes).

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use dtta_core::diffusion::{
    diffusion_loss, forward_noise, loss_value, sample_pairs, to_model_space, NoisePair, NoiseSchedule,
};
use dtta_core::nn::{
    select_subset, ClassEmbeddingTable, Classifier, ClassifierConfig, EpsNetConfig, EpsilonNet, OptimizerConfig,
    ParamStore, ParamSubset,
};
use dtta_core::rng::{normal_vec, seeded};
use dtta_core::tensor::gradcheck::{finite_difference_grad, max_relative_error};
use dtta_core::tensor::Graph;
use dtta_core::tta::{adapt, build_condition_classification, diffusion_classifier, Models, TtaConfig, TtaMode};

use dtta_harness::config::{parse_with_overrides, Paths};
use dtta_harness::run::{self, RunOptions};
use dtta_harness::{aggregate, ResultRow};

use common::{tiny_models, PairOracle, ZeroDenoiser};

struct Verdict {
    pass: bool,
    detail: String,
    /// Reported but not required to pass.
    advisory: bool,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict {
        pass,
        detail,
        advisory: false,
    }
}

// ---- criterion 1 ----

fn values(stores: &[&ParamStore<f64>]) -> Vec<f64> {
    stores
        .iter()
        .flat_map(|s| s.iter().flat_map(|(_, p)| p.tensor.data().to_vec()))
        .collect()
}

fn set_values(m: &mut Models<f64>, flat: &[f64]) {
    let mut at = 0;
    for s in [&mut m.classifier.store, &mut m.epsnet.store, &mut m.table.store] {
        for (_, p) in s.iter_mut() {
            let d = p.tensor.data_mut();
            let n = d.len();
            d.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
    }
}

fn pipeline(m: &Models<f64>, x: &[f64], pairs: &[NoisePair<f64>], s: &NoiseSchedule, grads: bool) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let cb = m.classifier.store.bind(&mut g);
    let eb = m.epsnet.store.bind(&mut g);
    let (tb, tv) = m.table.bind(&mut g);
    let xv = g.constant(vec![1, x.len()], x.to_vec()).unwrap();
    let y = m.classifier.forward(&mut g, &cb, xv).unwrap();
    let c = build_condition_classification(&mut g, y, tv).unwrap();
    let loss = diffusion_loss(&mut g, &eb, s, &m.epsnet, &to_model_space(x), c.var(), pairs).unwrap();
    let value = g.item(loss);
    if !grads {
        return (value, Vec::new());
    }
    let gr = g.backward(loss).unwrap();
    let mut out = m.clone();
    for (store, b) in [
        (&mut out.classifier.store, &cb),
        (&mut out.epsnet.store, &eb),
        (&mut out.table.store, &tb),
    ] {
        store.zero_grad();
        store.accumulate(b, &gr).unwrap();
    }
    let flat = [&out.classifier.store, &out.epsnet.store, &out.table.store]
        .iter()
        .flat_map(|s| s.iter().flat_map(|(_, p)| p.tensor.grad().unwrap().to_vec()))
        .collect();
    (value, flat)
}

fn gradient_oracle() -> Verdict {
    let start = Instant::now();
    let m: Models<f64> = tiny_models(4, 3, 11);
    let s = NoiseSchedule::linear(50).unwrap();
    let x = common::image::<f64>(16, 5);
    let pairs = sample_pairs(&mut seeded(2), 4, &s, 16);
    let flat = values(&[&m.classifier.store, &m.epsnet.store, &m.table.store]);
    let analytic = pipeline(&m, &x, &pairs, &s, true).1;
    let mut probe = m.clone();
    let numeric = finite_difference_grad(
        |p| {
            set_values(&mut probe, p);
            pipeline(&probe, &x, &pairs, &s, false).0
        },
        &flat,
        1e-5,
    );
    let err = max_relative_error(&analytic, &numeric);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        flat.len() <= 5000 && err <= 1e-4 && secs < 60.0,
        format!("{} params, max rel err {err:.2e}, {secs:.1}s", flat.len()),
    )
}

// ---- criteria 2, 3, 8 ----

fn noising_statistics() -> Verdict {
    let s = NoiseSchedule::linear(1000).unwrap();
    let x = [0.8f64, -0.3, 0.0, 1.0];
    let n = 10_000;
    let mut rng = seeded(21);
    let mut worst: f64 = 0.0;
    for t in [1, 500, 1000] {
        let ab = s.alpha_bar(t);
        let (mut sum, mut sq) = ([0.0; 4], [0.0; 4]);
        for _ in 0..n {
            let p = NoisePair { t, eps: normal_vec::<f64>(&mut rng, 4) };
            for (k, v) in forward_noise(&s, &x, &p).into_iter().enumerate() {
                sum[k] += v;
                sq[k] += v * v;
            }
        }
        let var = 1.0 - ab;
        for k in 0..4 {
            let mean = sum[k] / n as f64;
            let emp = (sq[k] - n as f64 * mean * mean) / (n - 1) as f64;
            let z_mean = (mean - ab.sqrt() * x[k]).abs() / (var / n as f64).sqrt();
            let z_var = (emp - var).abs() / (var * (2.0 / (n - 1) as f64).sqrt());
            worst = worst.max(z_mean).max(z_var);
        }
    }
    verdict(worst <= 3.0, format!("worst deviation {worst:.2} SE over t in {{1, 500, 1000}}"))
}

fn loss_oracle() -> Verdict {
    let s = NoiseSchedule::linear(1000).unwrap();
    let x = common::image::<f64>(9, 1);
    let pairs = sample_pairs(&mut seeded(3), 32, &s, 9);
    let oracle = PairOracle { pairs: pairs.clone(), cond_dim: 2, timesteps: 1000 };
    let perfect = loss_value(&s, &oracle, &x, &[0.0, 0.0], &pairs).unwrap();

    let (n, dim) = (10_000, 4);
    let pairs = sample_pairs::<f64>(&mut seeded(8), n, &s, dim);
    let zero = ZeroDenoiser { dim, cond_dim: 1, timesteps: 1000 };
    let z = loss_value(&s, &zero, &[0.1, 0.2, 0.3, 0.4], &[0.0], &pairs).unwrap();
    let sigma = (2.0 / (n * dim) as f64).sqrt();
    verdict(
        perfect == 0.0 && (z - 1.0).abs() <= 3.0 * sigma,
        format!("perfect {perfect}, zero {z:.4} (1 ± {:.4})", 3.0 * sigma),
    )
}

fn variance_scaling() -> Verdict {
    let s = NoiseSchedule::linear(50).unwrap();
    let m = tiny_models::<f64>(3, 2, 6);
    let x = common::image::<f64>(9, 3);
    let cond = m.table.row(0).to_vec();
    let mut rng = seeded(77);
    let mut variance = |b: usize| {
        let draws: Vec<f64> = (0..200)
            .map(|_| loss_value(&s, &m.epsnet, &x, &cond, &sample_pairs(&mut rng, b, &s, 9)).unwrap())
            .collect();
        let mean = draws.iter().sum::<f64>() / 200.0;
        draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / 199.0
    };
    let (v1, v64) = (variance(1), variance(64));
    verdict(v64 < v1 / 16.0, format!("var B=64 {v64:.3e} vs var B=1 / 16 = {:.3e}", v1 / 16.0))
}

// ---- criteria 4, 5, 6 ----

fn tta(batch: usize, micro: usize) -> TtaConfig {
    TtaConfig {
        steps: 3,
        batch,
        micro_batch: micro,
        optimizer: OptimizerConfig::sgd_momentum().with_lr(0.05),
        adapt_phi: false,
        seed: 13,
        ..TtaConfig::default()
    }
}

fn accumulation_identity() -> Verdict {
    let s = NoiseSchedule::linear(50).unwrap();
    let x = common::image::<f64>(16, 1);
    let run = |micro| {
        let mut m = tiny_models::<f64>(4, 3, 2);
        let c = TtaConfig { mode: TtaMode::Online, adapt_phi: true, ..tta(180, micro) };
        adapt(&x, &mut m, &s, &c).unwrap();
        values(&[&m.classifier.store, &m.epsnet.store, &m.table.store])
    };
    let (a, b) = (run(20), run(180));
    let worst = a
        .iter()
        .zip(&b)
        .map(|(p, q)| (p - q).abs() / (p.abs().max(q.abs()) + 1e-12))
        .fold(0.0, f64::max);
    verdict(worst <= 1e-6, format!("max relative difference {worst:.2e}"))
}

fn subset_soundness() -> Verdict {
    let s = NoiseSchedule::linear(50).unwrap();
    let x = common::image::<f64>(16, 3);
    let mut failures = Vec::new();
    for subset in ParamSubset::ALL {
        for adapt_phi in [false, true] {
            let mut m = tiny_models::<f64>(4, 3, 5);
            m.classifier.add_adapters(2, &mut seeded(1)).unwrap();
            let frozen = match subset {
                ParamSubset::LogitsOnly => m.classifier.store.digest(),
                _ => {
                    let mask = select_subset(&m.classifier.store, subset).unwrap();
                    m.classifier.store.digest_where(|p, _| mask[p])
                }
            };
            let phi = (m.epsnet.store.digest(), m.table.store.digest());
            let c = TtaConfig { subset, adapt_phi, mode: TtaMode::Online, ..tta(8, 8) };
            let report = adapt(&x, &mut m, &s, &c).unwrap();
            let frozen_after = match subset {
                ParamSubset::LogitsOnly => m.classifier.store.digest(),
                _ => {
                    let mask = select_subset(&m.classifier.store, subset).unwrap();
                    m.classifier.store.digest_where(|p, _| mask[p])
                }
            };
            let phi_ok = adapt_phi && subset != ParamSubset::LogitsOnly
                || (m.epsnet.store.digest(), m.table.store.digest()) == phi;
            if frozen != frozen_after || report.frozen_digest_before != report.frozen_digest_after || !phi_ok {
                failures.push(format!("{subset}/phi={adapt_phi}"));
            }
        }
    }
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{} subset x phi runs, frozen digests unchanged", 2 * ParamSubset::ALL.len())
        } else {
            format!("changed: {}", failures.join(", "))
        },
    )
}

fn isolation() -> Verdict {
    let s = NoiseSchedule::linear(50).unwrap();
    let (a, b) = (common::image::<f64>(16, 7), common::image::<f64>(16, 8));
    let c = TtaConfig { adapt_phi: true, ..tta(8, 4) };
    let original = tiny_models::<f64>(4, 3, 9);
    let mut m = original.clone();
    adapt(&a, &mut m, &s, &c).unwrap();
    let after_a = adapt(&b, &mut m, &s, &c).unwrap();
    let alone = adapt(&b, &mut original.clone(), &s, &c).unwrap();
    verdict(
        after_a == alone && m == original,
        format!("reports equal: {}, models restored: {}", after_a == alone, m == original),
    )
}

// ---- criterion 9 ----

fn best_of<T>(reps: usize, mut f: impl FnMut() -> T) -> Duration {
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(f());
            t.elapsed()
        })
        .min()
        .unwrap()
}

fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy * sxy / (sxx * syy)
}

fn classifier_scaling() -> Verdict {
    let dim = 256;
    let s = NoiseSchedule::linear(1000).unwrap();
    let epsnet = EpsilonNet::<f32>::new(EpsNetConfig::mlp(dim, 32, 1000), &mut seeded(1)).unwrap();
    let x: Vec<f32> = common::image(dim, 4);
    let cfg = TtaConfig {
        batch: 64,
        micro_batch: 64,
        adapt_phi: false,
        ..TtaConfig::default()
    };
    let (mut dc, mut tta_t) = (Vec::new(), Vec::new());
    let sweep = [2usize, 4, 8, 16, 32];
    for &l in &sweep {
        let mut models = Models {
            classifier: Classifier::new(ClassifierConfig::mlp(dim, l), &mut seeded(2)).unwrap(),
            epsnet: epsnet.clone(),
            table: ClassEmbeddingTable::new(l, 32, &mut seeded(3)).unwrap(),
        };
        let mut rng = seeded(5);
        dc.push(best_of(3, || diffusion_classifier(&x, &models.epsnet, &models.table, &s, 64, &mut rng).unwrap()).as_secs_f64());
        tta_t.push(best_of(3, || adapt(&x, &mut models, &s, &cfg).unwrap()).as_secs_f64());
    }
    let ls: Vec<f64> = sweep.iter().map(|&l| l as f64).collect();
    let r2 = r_squared(&ls, &dc);
    let lo = tta_t.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = tta_t.iter().cloned().fold(0.0, f64::max);
    let spread = (hi - lo) / lo;
    let ms = |v: &[f64]| v.iter().map(|t| format!("{:.0}", 1e3 * t)).collect::<Vec<_>>().join("/");
    verdict(
        r2 >= 0.95 && spread < 0.2,
        format!(
            "DC ms {} (R^2 {r2:.4}); adapt ms {} (spread {:.1}%)",
            ms(&dc),
            ms(&tta_t),
            100.0 * spread
        ),
    )
}

// ---- criteria 7 and 10 ----

fn mean_delta(rows: &[ResultRow], cell: &str) -> f64 {
    aggregate(rows)
        .into_iter()
        .find(|g| g.condition == cell)
        .map(|g| g.delta.mean)
        .unwrap_or(f64::NAN)
}

struct Pipeline {
    desk: Vec<Verdict>,
    determinism: Verdict,
    extras: Vec<(String, Verdict)>,
}

fn pipeline_checks(root: &Path) -> Pipeline {
    let load = |sets: &[&str]| parse_with_overrides("", &sets.iter().map(|s| s.to_string()).collect::<Vec<_>>()).unwrap();

    let cfg = load(&["experiment.cells=[\"single_pair\", \"noise_aug\", \"adapt_phi\"]"]);
    let paths = Paths::resolve(&cfg, root);
    let t0 = Instant::now();
    let trained = run::train(&cfg, &paths).unwrap();
    let train_time = t0.elapsed();
    let (ablate_csv, rows) = run::ablate(&cfg, &paths, &RunOptions::default()).unwrap();
    let wall = t0.elapsed();
    let tta_time: Duration = rows.iter().filter(|r| r.condition == "noise_aug").map(|r| r.wall_clock).sum();

    let deltas: Vec<f64> = rows.iter().filter(|r| r.condition == "noise_aug").map(|r| r.delta).collect();
    let positive = deltas.iter().filter(|&&d| d > 0.0).count();
    let (b1, b64, phi) = (
        mean_delta(&rows, "single_pair"),
        mean_delta(&rows, "noise_aug"),
        mean_delta(&rows, "adapt_phi"),
    );
    let budget = (train_time + tta_time).as_secs_f64();
    let pts = |v: f64| format!("{:+.2}", 100.0 * v);
    let desk = vec![
        verdict(
            positive >= 4 && budget < 1800.0,
            format!(
                "delta > 0 in {positive}/5 seeds (pts {}); train + tta {budget:.0}s",
                deltas.iter().map(|&d| pts(d)).collect::<Vec<_>>().join(", ")
            ),
        ),
        verdict(b1 < b64, format!("B=1 mean delta {} < B=64 {}", pts(b1), pts(b64))),
        Verdict {
            pass: phi >= b64,
            detail: format!("adapt_phi mean delta {} >= frozen {}", pts(phi), pts(b64)),
            advisory: true,
        },
    ];

    // a small run over every method, replayed, plus the grid above
    let small = load(&[
        "tta.examples=24",
        "experiment.seeds=[1, 2]",
        "experiment.methods=[\"none\", \"diffusion_tta\", \"entropy\", \"adapt_logits\", \"adapt_logits_ensemble\", \"diffusion_classifier\"]",
        "experiment.output=\"small\"",
    ]);
    let (small_csv, small_rows) = run::tta(&small, &Paths::resolve(&small, root), &RunOptions::default()).unwrap();
    let replays = [(&small_csv, "replay_small"), (&ablate_csv, "replay_ablate")]
        .into_iter()
        .map(|(f, out)| run::replay(f, root, &root.join(out)).is_ok())
        .collect::<Vec<_>>();
    let determinism = verdict(
        replays.iter().all(|&ok| ok),
        format!("tta replay identical: {}, ablate replay identical: {}", replays[0], replays[1]),
    );

    let mut extras = Vec::new();
    extras.push((
        "train: clean test accuracy >= 0.9".into(),
        verdict(trained.clean_accuracy >= 0.9, format!("{:.2}%", 100.0 * trained.clean_accuracy)),
    ));
    let none_ok = small_rows.iter().filter(|r| r.method == "none").all(|r| r.acc_after == r.acc_before);
    extras.push(("tta: method none leaves accuracy unchanged".into(), verdict(none_ok, String::new())));

    let random = load(&["experiment.cells=[\"random_init\"]", "experiment.output=\"random\""]);
    let (_, rows) = run::ablate(&random, &Paths::resolve(&random, root), &RunOptions::default()).unwrap();
    let g = &aggregate(&rows)[0];
    let chance = 1.0 / cfg.data.classes as f64;
    extras.push((
        "ablate: random-init cell near chance".into(),
        verdict(
            (g.acc_after.mean - chance).abs() <= 0.1,
            format!("{:.2}% before, {:.2}% after, chance {:.2}%", 100.0 * g.acc_before.mean, 100.0 * g.acc_after.mean, 100.0 * chance),
        ),
    ));

    let clean = load(&[
        "corruption.severity=0",
        "experiment.cells=[\"adapt_logits\", \"adapt_logits_ensemble\"]",
        "experiment.output=\"clean\"",
    ]);
    let (_, rows) = run::ablate(&clean, &Paths::resolve(&clean, root), &RunOptions::default()).unwrap();
    let acc = |cell: &str| aggregate(&rows).into_iter().find(|g| g.condition == cell).unwrap().acc_after.mean;
    let (logits, ens) = (acc("adapt_logits"), acc("adapt_logits_ensemble"));
    extras.push((
        "ablate: logits+ensemble >= logits on clean data".into(),
        verdict(ens >= logits, format!("{:.2}% vs {:.2}%", 100.0 * ens, 100.0 * logits)),
    ));
    println!("(pipeline wall clock {:.0}s)", wall.as_secs_f64());

    Pipeline {
        desk,
        determinism,
        extras,
    }
}

fn line(id: &str, name: &str, v: &Verdict) -> bool {
    let tag = match (v.pass, v.advisory) {
        (true, _) => "PASS",
        (false, false) => "FAIL",
        (false, true) => "FAIL (advisory)",
    };
    println!("criterion {id:<3} {tag:<15} {name}: {}", v.detail);
    v.pass || v.advisory
}

fn main() -> ExitCode {
    let root = tempfile::tempdir().unwrap();
    let mut ok = true;
    ok &= line("1", "gradient oracle", &gradient_oracle());
    ok &= line("2", "noising statistics", &noising_statistics());
    ok &= line("3", "loss oracle", &loss_oracle());
    ok &= line("4", "accumulation identity", &accumulation_identity());
    ok &= line("5", "subset soundness", &subset_soundness());
    ok &= line("6", "single-sample isolation", &isolation());

    let p = pipeline_checks(root.path());
    let names = ["Diffusion-TTA gains at severity 5", "B=1 below B=64", "adapting diffusion weights"];
    let mut seven = true;
    for (clause, (v, name)) in ["7a", "7b", "7c"].iter().zip(p.desk.iter().zip(names)) {
        seven &= v.pass;
        ok &= line(clause, name, v);
    }
    println!("criterion 7   {:<15} desk-scale direction (all clauses)", if seven { "PASS" } else { "FAIL" });
    ok &= line("8", "variance scaling", &variance_scaling());
    ok &= line("9", "diffusion classifier scaling", &classifier_scaling());
    ok &= line("10", "determinism", &p.determinism);
    for (name, v) in &p.extras {
        ok &= line("-", name, v);
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
