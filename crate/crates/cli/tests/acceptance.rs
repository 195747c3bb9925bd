//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. `ACCEPTANCE_ONLY=4,5` runs a subset.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use crisisgraph::embedding::{DocVector, EmbeddingTable};
use crisisgraph::graph::{brute_force_knn, build_graph, build_kdtree, knn_query};
use crisisgraph::model::{
    accumulate_class_gradient, accumulate_context_gradient, context_loss, example_class_loss, forward, FilterSpec,
    ModelConfig, ModelParams, TrainingMode,
};
use crisisgraph::rng::{stream, Stream};
use crisisgraph::sampler::{ContextKind, ContextSample, ContextSampler, SamplerConfig};
use crisisgraph::trainer::{Budget, MetricsReport, SweepRow};
use crisisgraph_cli::commands::{cmd_sweep, cmd_synth};
use crisisgraph_cli::config::RunConfig;
use rand::Rng as _;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

/// Synthetic fixture shared by the uplift, monotonicity and determinism
/// checks: K=2, 6000 labeled documents, 5000 unlabeled.
const FIXTURE: &str = "\
synth.classes = 2
synth.docs_per_class = 3000
synth.unlabeled = 5000
synth.dim = 20
synth.vocab_size = 500
synth.shared_vocab_size = 500
synth.tokens_per_doc = 12
synth.signal = 0.5
synth.margin = 2.0
synth.noise = 1.0
model.max_len = 12
model.filters = 2:8:2,3:8:3,4:8:4
model.hidden = 64
train.max_epochs = 60
train.patience = 10
train.batch_size = 8
train.context_samples = 20000
train.lr_context = 0.03
sampler.rho2 = 0.8
";

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn fixture_config(seed: u64, dir: &Path) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::parse(FIXTURE, "fixture").map_err(|e| e.to_string())?;
    cfg.seed = seed;
    let files = cmd_synth(&cfg, Some(dir)).map_err(|e| e.to_string())?;
    cfg.labeled = Some(files.labeled);
    cfg.unlabeled = files.unlabeled;
    cfg.embeddings = Some(files.embeddings);
    Ok(cfg)
}

fn sweep(seed: u64, budgets: &[Budget]) -> Result<Vec<SweepRow>, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = fixture_config(seed, dir.path())?;
    cfg.budgets = budgets.to_vec();
    cmd_sweep(&cfg, Some(&dir.path().join("sweep.tsv"))).map_err(|e| e.to_string())
}

fn f1(rows: &[SweepRow], budget: Budget, mode: TrainingMode) -> f64 {
    rows.iter()
        .find(|r| r.budget == budget && r.mode == mode)
        .map(|r| r.report.weighted_f1)
        .expect("sweep row present")
}

// 1 -------------------------------------------------------------------------

const FD_STEP: f64 = 1e-5;
const FD_TOLERANCE: f64 = 1e-4;

fn gradient_check() -> Outcome {
    let config = ModelConfig {
        max_len: 6,
        filters: vec![FilterSpec {
            width: 2,
            count: 3,
            pool: 2,
        }],
        hidden: [4; 4],
        num_classes: 2,
        lambda: 1.0,
        dropout: 0.0,
        mode: TrainingMode::Semi,
    };
    let mut rng = stream(31, Stream::Init);
    let d = 3;
    let rows = (0..8).map(|w| {
        (
            format!("w{w}"),
            (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        )
    });
    let table = EmbeddingTable::from_rows(d, rows, 31).map_err(|e| e.to_string())?;
    let docs: Vec<Vec<usize>> = (0..5)
        .map(|_| {
            (0..6)
                .map(|_| table.index_of(&format!("w{}", rng.random_range(0..8))).unwrap())
                .collect()
        })
        .collect();
    let labels = [0, 1, 1, 0, 1];
    let samples = [
        ContextSample {
            i: 0,
            j: 1,
            positive: true,
            kind: ContextKind::Graph,
        },
        ContextSample {
            i: 2,
            j: 4,
            positive: false,
            kind: ContextKind::Graph,
        },
        ContextSample {
            i: 3,
            j: 0,
            positive: true,
            kind: ContextKind::Label,
        },
        ContextSample {
            i: 4,
            j: 3,
            positive: false,
            kind: ContextKind::Label,
        },
    ];
    let mut params = ModelParams::zeros(&config, d, 5);
    // moderate weights keep the softmax away from its probability floor
    for t in params.tensors_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.5 * rng.sample::<f64, _>(StandardNormal));
    }

    let loss = |p: &ModelParams| -> f64 {
        let class: f64 = docs
            .iter()
            .zip(&labels)
            .map(|(x, &y)| example_class_loss(&forward(x, &table, p, &config, None).unwrap(), y))
            .sum();
        let ctx: f64 = samples
            .iter()
            .map(|s| context_loss(&forward(&docs[s.i], &table, p, &config, None).unwrap(), s, p).unwrap())
            .sum();
        class / docs.len() as f64 + config.lambda * ctx / samples.len() as f64
    };
    let mut grads = params.zeros_like();
    for (x, &y) in docs.iter().zip(&labels) {
        let t = forward(x, &table, &params, &config, None).map_err(|e| e.to_string())?;
        accumulate_class_gradient(&t, y, &params, &config, &mut grads, 1.0 / docs.len() as f64);
    }
    for s in &samples {
        let t = forward(&docs[s.i], &table, &params, &config, None).map_err(|e| e.to_string())?;
        accumulate_context_gradient(
            &t,
            s,
            &params,
            &config,
            &mut grads,
            config.lambda / samples.len() as f64,
        )
        .map_err(|e| e.to_string())?;
    }

    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (t, name) in names.iter().enumerate() {
        for i in 0..params.tensors()[t].len() {
            let mut p = params.clone();
            let orig = p.tensors()[t].data()[i];
            p.tensors_mut()[t].data_mut()[i] = orig + FD_STEP;
            let up = loss(&p);
            p.tensors_mut()[t].data_mut()[i] = orig - FD_STEP;
            let down = loss(&p);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grads.tensors()[t].data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}]"));
            }
            checked += 1;
        }
    }
    let msg = format!(
        "{checked} parameters, worst relative error {:.2e} at {}",
        worst.0, worst.1
    );
    if worst.0 <= FD_TOLERANCE {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// 2 -------------------------------------------------------------------------

fn knn_oracle() -> Outcome {
    let mut rng = stream(2, Stream::Unknown);
    let (mut queries, mut mismatches) = (0, 0);
    for trial in 0..50 {
        let n = rng.random_range(2..=500);
        let d = [2, 8, 64][trial % 3];
        let k = [1, 5, 10, 20][(trial / 3) % 4];
        // every other trial on an integer grid, to force distance ties
        let grid = trial % 2 == 0;
        let vecs: Vec<DocVector> = (0..n)
            .map(|i| DocVector {
                values: (0..d)
                    .map(|_| {
                        if grid {
                            f64::from(rng.random_range(-3i32..3))
                        } else {
                            rng.random_range(-10.0..10.0)
                        }
                    })
                    .collect(),
                source_id: format!("d{i}"),
            })
            .collect();
        let tree = build_kdtree(&vecs).map_err(|e| e.to_string())?;
        for q in 0..n {
            let fast = knn_query(&tree, q, k).map_err(|e| e.to_string())?;
            let slow = brute_force_knn(&vecs, q, k).map_err(|e| e.to_string())?;
            let same = fast.len() == slow.len()
                && fast
                    .iter()
                    .zip(&slow)
                    .all(|((a, da), (b, db))| a == b && (da - db).abs() <= 1e-12);
            queries += 1;
            if !same {
                mismatches += 1;
            }
        }
    }
    let msg = format!("50 trials, {queries} queries, {mismatches} mismatches");
    if mismatches == 0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// 3 -------------------------------------------------------------------------

fn sampler_statistics() -> Outcome {
    let mut rng = stream(3, Stream::Unknown);
    let vecs: Vec<DocVector> = (0..200)
        .map(|i| DocVector {
            values: vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
            source_id: i.to_string(),
        })
        .collect();
    let graph = build_graph(&vecs, 10).map_err(|e| e.to_string())?;
    let labels: Vec<Option<usize>> = (0..200).map(|i| (i % 2 == 0).then_some(i % 3 % 2)).collect();
    let sampler = ContextSampler::new(
        &graph,
        &labels,
        SamplerConfig {
            rho1: 0.5,
            rho2: 0.5,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let mut draw_rng = stream(3, Stream::Sampler);
    let draws = 100_000;
    let (mut positive, mut label_kind, mut violations) = (0usize, 0usize, 0usize);
    for _ in 0..draws {
        let s = sampler.sample(&mut draw_rng).map_err(|e| e.to_string())?;
        positive += usize::from(s.positive);
        let ok = match s.kind {
            ContextKind::Graph => s.i != s.j && sampler.is_neighbor(s.i, s.j) == s.positive,
            ContextKind::Label => {
                label_kind += 1;
                match (labels[s.i], labels[s.j]) {
                    (Some(a), Some(b)) => s.i != s.j && (a == b) == s.positive,
                    _ => false,
                }
            }
        };
        violations += usize::from(!ok);
    }
    let pf = positive as f64 / draws as f64;
    let lf = label_kind as f64 / draws as f64;
    let msg = format!("positive {pf:.4}, label-kind {lf:.4}, {violations} violations in {draws} draws");
    if (pf - 0.5).abs() <= 0.005 && (lf - 0.5).abs() <= 0.005 && violations == 0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// 4 and 5 -------------------------------------------------------------------

fn uplift(low_budget: &mut Vec<(u64, Vec<SweepRow>)>) -> Outcome {
    let mut report = String::new();
    let (mut wins, mut in_range) = (0, 0);
    for seed in SEEDS {
        let rows = sweep(seed, &[Budget::Count(100)])?;
        let sup = f1(&rows, Budget::Count(100), TrainingMode::Supervised);
        let semi = f1(&rows, Budget::Count(100), TrainingMode::Semi);
        let gain = 100.0 * (semi - sup);
        wins += usize::from(gain >= 3.0);
        in_range += usize::from((0.60..=0.85).contains(&sup));
        let _ = write!(report, " seed {seed}: sup {sup:.4} semi {semi:.4} ({gain:+.2});");
        low_budget.push((seed, rows));
    }
    let msg = format!("{wins}/5 seeds gain >= 3 points, {in_range}/5 supervised in [0.60, 0.85];{report}");
    if wins >= 4 && in_range == SEEDS.len() {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Non-decreasing up to a single drop of at most one point.
fn nearly_monotone(f1s: &[f64]) -> bool {
    let drops: Vec<f64> = f1s.windows(2).map(|w| w[0] - w[1]).filter(|d| *d > 0.0).collect();
    drops.is_empty() || (drops.len() == 1 && drops[0] <= 0.01)
}

fn monotonicity(low_budget: &[(u64, Vec<SweepRow>)]) -> Outcome {
    let budgets = [Budget::Count(100), Budget::Count(500), Budget::Count(2000), Budget::All];
    let mut report = String::new();
    let mut good = 0;
    for seed in SEEDS {
        let mut rows = match low_budget.iter().find(|(s, _)| *s == seed) {
            Some((_, r)) => r.clone(),
            None => sweep(seed, &budgets[..1])?,
        };
        rows.extend(sweep(seed, &budgets[1..])?);
        let mut ok = true;
        for mode in [TrainingMode::Supervised, TrainingMode::Semi] {
            let f: Vec<f64> = budgets.iter().map(|&b| f1(&rows, b, mode)).collect();
            ok &= nearly_monotone(&f);
            let cells: Vec<String> = f.iter().map(|v| format!("{:.2}", 100.0 * v)).collect();
            let _ = write!(report, " seed {seed} {mode} [{}];", cells.join(" "));
        }
        good += usize::from(ok);
    }
    let msg = format!("{good}/5 seeds monotone in both modes;{report}");
    if good >= 4 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// 6 -------------------------------------------------------------------------

fn metrics() -> Outcome {
    let r = MetricsReport::from_predictions(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).map_err(|e| e.to_string())?;
    let p = MetricsReport::from_predictions(&[0, 1, 1, 2, 0], &[0, 1, 1, 2, 0], 3).map_err(|e| e.to_string())?;
    let msg = format!(
        "confusion example F1 {:.4}, perfect prediction F1 {:.4}",
        r.weighted_f1, p.weighted_f1
    );
    if (r.weighted_f1 - 0.7333).abs() <= 1e-4 && p.weighted_f1 == 1.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// 7 -------------------------------------------------------------------------

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = fixture_config(7, &dir.path().join("data"))?;
    let conf = dir.path().join("fixture.conf");
    let mut text = FIXTURE.to_owned();
    for (key, path) in [
        ("labeled", &cfg.labeled),
        ("unlabeled", &cfg.unlabeled),
        ("embeddings", &cfg.embeddings),
    ] {
        let _ = writeln!(text, "paths.{key} = {}", path.as_ref().unwrap().display());
    }
    // a few epochs are enough to exercise every random stream
    text.push_str("train.max_epochs = 4\ntrain.patience = 4\n");
    fs::write(&conf, text).map_err(|e| e.to_string())?;
    let mut artifacts = Vec::new();
    for run in ["a", "b"] {
        let ckpt = dir.path().join(format!("{run}.ckpt"));
        let out = Command::new(env!("CARGO_BIN_EXE_crisisgraph"))
            .args(["train", "--seed", "7", "--config"])
            .arg(&conf)
            .arg("--out")
            .arg(&ckpt)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(String::from_utf8_lossy(&out.stderr).into_owned());
        }
        let log = dir.path().join(format!("{run}.ckpt.log"));
        artifacts.push((
            fs::read(&ckpt).map_err(|e| e.to_string())?,
            fs::read(&log).map_err(|e| e.to_string())?,
        ));
    }
    let (a, b) = (&artifacts[0], &artifacts[1]);
    let msg = format!(
        "checkpoint {} bytes, log {} lines",
        a.0.len(),
        String::from_utf8_lossy(&a.1).lines().count()
    );
    if a == b {
        Ok(msg)
    } else {
        Err(format!("outputs differ; {msg}"))
    }
}

// 8 -------------------------------------------------------------------------

fn external_harness() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = stream(8, Stream::Synth);
    let labels = ["relevant", "irrelevant"];
    let words = [
        [
            "flood", "damage", "rescue", "injured", "evacuate", "bridge", "shelter", "donate",
        ],
        [
            "coffee", "music", "game", "weekend", "movie", "lunch", "party", "shopping",
        ],
    ];
    let mut labeled = String::new();
    for i in 0..3600 {
        let c = i % 2;
        let mut text: Vec<String> = (0..8).map(|_| words[c][rng.random_range(0..8)].to_owned()).collect();
        text.push(format!("@user{} http://t.co/{i} #tag{}", i % 7, i % 5));
        let _ = writeln!(labeled, "{}\t{}\t{}", 500_000_000 + i, labels[c], text.join(" "));
    }
    let mut emb = format!("{} 4\n", 16);
    for (c, ws) in words.iter().enumerate() {
        for w in ws {
            let v: Vec<String> = (0..4)
                .map(|k| format!("{:.4}", if k == c { 1.0 } else { 0.0 } + rng.random_range(-0.5..0.5)))
                .collect();
            let _ = writeln!(emb, "{w} {}", v.join(" "));
        }
    }
    let (lab, vec_path) = (dir.path().join("labeled.tsv"), dir.path().join("vectors.txt"));
    fs::write(&lab, labeled).map_err(|e| e.to_string())?;
    fs::write(&vec_path, emb).map_err(|e| e.to_string())?;
    let out = Command::new(env!("CARGO_BIN_EXE_crisisgraph"))
        .args(["sweep", "--seed", "8"])
        .args(["--set", &format!("paths.labeled={}", lab.display())])
        .args(["--set", &format!("paths.embeddings={}", vec_path.display())])
        .args(["--set", "sweep.budgets=100,500,1000,2000,all"])
        .args([
            "--set",
            "model.filters=2:4:2",
            "--set",
            "model.hidden=8",
            "--set",
            "model.max_len=10",
        ])
        .args([
            "--set",
            "train.max_epochs=5",
            "--set",
            "train.patience=5",
            "--set",
            "train.context_samples=500",
        ])
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    let tsv = String::from_utf8_lossy(&out.stdout).into_owned();
    let table = String::from_utf8_lossy(&out.stderr).into_owned();
    let lines: Vec<&str> = table.lines().collect();
    let header: Vec<&str> = lines
        .first()
        .map(|l| l.split_whitespace().collect())
        .unwrap_or_default();
    let shaped = header == ["mode", "100", "500", "1000", "2000", "All", "L"]
        && lines.len() == 3
        && ["supervised", "semi"].iter().zip(&lines[1..]).all(|(mode, l)| {
            let cells: Vec<&str> = l.split_whitespace().collect();
            cells.len() == 6 && cells[0] == *mode && cells[1..].iter().all(|c| c.parse::<f64>().is_ok())
        })
        && tsv.lines().count() == 10;
    let msg = format!("sweep table:\n{table}");
    if shaped {
        Ok(msg.trim_end().to_owned())
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------------------

fn main() {
    let only: Option<HashSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|s| s.contains(&n));
    let mut low_budget = Vec::new();
    let mut failures = 0;
    let mut report = |n: usize, name: &str, limit: Option<Duration>, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(n) {
            return;
        }
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        let slow = limit.is_some_and(|l| took > l);
        let (status, detail) = match &outcome {
            Ok(d) if !slow => ("PASS", d.clone()),
            Ok(d) => ("FAIL", format!("over time limit; {d}")),
            Err(d) => ("FAIL", d.clone()),
        };
        if status == "FAIL" {
            failures += 1;
        }
        println!("{status} criterion {n} ({name}, {:.1}s): {detail}", took.as_secs_f64());
    };
    let mins = |m: u64| Some(Duration::from_secs(60 * m));
    report(1, "gradient check", Some(Duration::from_secs(10)), &mut gradient_check);
    report(2, "k-NN oracle", Some(Duration::from_secs(30)), &mut knn_oracle);
    report(
        3,
        "sampler statistics",
        Some(Duration::from_secs(10)),
        &mut sampler_statistics,
    );
    report(4, "semi-supervised uplift", mins(10), &mut || uplift(&mut low_budget));
    report(5, "label-budget monotonicity", mins(15), &mut || {
        monotonicity(&low_budget)
    });
    report(6, "metric correctness", None, &mut metrics);
    report(7, "determinism", None, &mut determinism);
    report(8, "external reproduction harness", None, &mut external_harness);
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
