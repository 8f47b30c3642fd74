//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line to the
//! real stdout (bypassing capture) and then asserts its outcome.

use std::io::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use chunkformer::attention::{ForwardCtx, NormPlacement};
use chunkformer::bench::{measure_footprint, BenchCase, Variant};
use chunkformer::chunkformer::{Batch, ChunkFormer, ChunkFormerConfig, PredictionMode};
use chunkformer::config::{ModelKind, RunConfig};
use chunkformer::embedding::{EmbeddedSequence, InputFeature};
use chunkformer::numerics::{Tape, Tensor};
use chunkformer::pipeline::{
    assignment, discretize, preprocess, FeatureKind, FeatureSpec, NonFinitePolicy, PipelineConfig, RawTable, Split,
    SplitSpec,
};
use chunkformer::run;
use chunkformer::training::{auc, macro_f1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn report(n: usize, name: &str, elapsed: Duration, limit: Duration, outcome: Outcome) {
    let outcome = outcome.and_then(|detail| {
        if elapsed <= limit {
            Ok(detail)
        } else {
            Err(format!("{detail}; took {elapsed:.1?}, limit {limit:?}"))
        }
    });
    let line = match &outcome {
        Ok(detail) => format!("criterion {n}: PASS  {name} ({detail}; {elapsed:.2?})"),
        Err(detail) => format!("criterion {n}: FAIL  {name} ({detail})"),
    };
    let _ = writeln!(std::io::stdout(), "{line}");
    assert!(outcome.is_ok(), "{line}");
}

fn random_seq(rng: &mut ChaCha8Rng, len: usize, width: usize) -> EmbeddedSequence {
    let data = (0..len * width).map(|_| rng.random_range(-1.0..1.0)).collect();
    EmbeddedSequence::new(
        Tensor::new(vec![len, width], data).unwrap(),
        vec![true; len],
        vec![0.0; len],
    )
    .unwrap()
}

fn encoder(width: usize, seq_len: usize, d_model: usize, heads: usize, chunks: &[usize]) -> ChunkFormerConfig {
    let input = InputFeature {
        name: "x".into(),
        vocab_size: 2,
        dim: width,
    };
    let mut cfg = ChunkFormerConfig::standard(vec![input], seq_len, d_model, chunks);
    for s in &mut cfg.stages {
        s.block.heads = heads;
        s.block.dropout = 0.0;
    }
    cfg
}

/// Final hidden states after every stage, as a flat row-major vector.
fn encode(model: &ChunkFormer, seq: &EmbeddedSequence) -> Vec<f64> {
    let mut ctx = ForwardCtx::eval();
    let mut h = model.input_states(seq).unwrap();
    for _ in 0..model.config.stages.len() {
        h = model.stage_forward(h, &mut ctx).unwrap();
    }
    h.values.into_data()
}

mod oracle {
    //! A plain-loop transformer encoder block over the whole sequence.

    use chunkformer::params::ParamStore;

    pub type Rows = Vec<Vec<f64>>;

    fn weight(store: &ParamStore, name: &str) -> Vec<f64> {
        store.by_name(name).unwrap_or_else(|| panic!("no parameter {name}")).data().to_vec()
    }

    pub fn linear(x: &Rows, store: &ParamStore, name: &str) -> Rows {
        let w = weight(store, &format!("{name}.weight"));
        let b = weight(store, &format!("{name}.bias"));
        let out = b.len();
        x.iter()
            .map(|row| {
                (0..out)
                    .map(|j| b[j] + row.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    pub fn layer_norm(x: &Rows, store: &ParamStore, name: &str, eps: f64) -> Rows {
        let g = weight(store, &format!("{name}.gamma"));
        let b = weight(store, &format!("{name}.beta"));
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                row.iter()
                    .enumerate()
                    .map(|(c, v)| g[c] * (v - mean) / (var + eps).sqrt() + b[c])
                    .collect()
            })
            .collect()
    }

    pub fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    pub fn add(a: &Rows, b: &Rows) -> Rows {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
            .collect()
    }

    pub fn self_attention(x: &Rows, store: &ParamStore, name: &str, heads: usize) -> Rows {
        let q = linear(x, store, &format!("{name}.query"));
        let k = linear(x, store, &format!("{name}.key"));
        let v = linear(x, store, &format!("{name}.value"));
        let n = x.len();
        let d = q[0].len();
        let dh = d / heads;
        let mut out = vec![vec![0.0; d]; n];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let total: f64 = exp.iter().sum();
                for c in cols.clone() {
                    out[i][c] = (0..n).map(|j| exp[j] / total * v[j][c]).sum();
                }
            }
        }
        linear(&out, store, &format!("{name}.output"))
    }

    fn feedforward(x: &Rows, store: &ParamStore, name: &str) -> Rows {
        let h: Rows = linear(x, store, &format!("{name}.ff_in"))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        linear(&h, store, &format!("{name}.ff_out"))
    }

    pub fn pre_norm_block(x: &Rows, store: &ParamStore, name: &str, heads: usize, eps: f64) -> Rows {
        let a = self_attention(&layer_norm(x, store, &format!("{name}.norm1"), eps), store, name, heads);
        let x1 = add(x, &a);
        let f = feedforward(&layer_norm(&x1, store, &format!("{name}.norm2"), eps), store, name);
        add(&x1, &f)
    }

    pub fn post_norm_block(x: &Rows, store: &ParamStore, name: &str, heads: usize, eps: f64) -> Rows {
        let a = self_attention(x, store, name, heads);
        let x1 = layer_norm(&add(x, &a), store, &format!("{name}.norm1"), eps);
        let f = feedforward(&x1, store, name);
        layer_norm(&add(&x1, &f), store, &format!("{name}.norm2"), eps)
    }
}

#[test]
fn criterion_1_full_attention_equivalence() {
    let started = Instant::now();
    let (l, d, heads) = (16, 16, 2);
    let mut worst = 0.0f64;
    for norm in [NormPlacement::Pre, NormPlacement::Post] {
        for seed in 0..3 {
            let mut cfg = encoder(5, l, d, heads, &[l]);
            cfg.stages[0].block.norm = norm;
            let eps = cfg.stages[0].block.ln_eps;
            let model = ChunkFormer::new(cfg, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let seq = random_seq(&mut rng, l, 5);
            let h = model.input_states(&seq).unwrap();
            let x: oracle::Rows = (0..l).map(|r| h.values.row(r).to_vec()).collect();
            let expected = match norm {
                NormPlacement::Pre => oracle::pre_norm_block(&x, &model.params, "stage0", heads, eps),
                NormPlacement::Post => oracle::post_norm_block(&x, &model.params, "stage0", heads, eps),
            };
            let got = model.stage_forward(h, &mut ForwardCtx::eval()).unwrap();
            for (r, row) in expected.iter().enumerate() {
                for (a, b) in row.iter().zip(got.values.row(r)) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    let outcome = if worst <= 1e-9 {
        Ok(format!("max |diff| {worst:.2e} over pre/post norm, 3 seeds"))
    } else {
        Err(format!("max |diff| {worst:.2e} > 1e-9"))
    };
    report(1, "full-attention equivalence", started.elapsed(), Duration::from_secs(1), outcome);
}

#[test]
fn criterion_2_locality() {
    let started = Instant::now();
    let (l, k, width) = (12, 4, 3);
    let model = ChunkFormer::new(encoder(width, l, 8, 2, &[k]), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let seq = random_seq(&mut rng, l, width);
    let base = encode(&model, &seq);
    let d = 8;
    let mut failures = Vec::new();
    let mut pairs = 0;
    for p in 0..l {
        let mut moved = seq.clone();
        for v in &mut moved.values.data_mut()[p * width..(p + 1) * width] {
            *v += rng.random_range(0.5..1.5);
        }
        let out = encode(&model, &moved);
        for c in 0..l / k {
            pairs += 1;
            let rows = c * k * d..(c + 1) * k * d;
            let max_diff = base[rows.clone()]
                .iter()
                .zip(&out[rows])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let inside = p / k == c;
            if inside != (max_diff > 0.0) {
                failures.push(format!("position {p}, chunk {c}: diff {max_diff:e}"));
            }
        }
    }
    let outcome = if failures.is_empty() {
        Ok(format!("{pairs} (position, chunk) pairs; outside diffs exactly 0, inside nonzero"))
    } else {
        Err(failures.join("; "))
    };
    report(2, "locality", started.elapsed(), Duration::from_secs(10), outcome);
}

/// Input position `j` reaches output position `i` through the chunk maps.
fn analytic_dependencies(l: usize, chunks: &[usize]) -> Vec<Vec<bool>> {
    let mut dep: Vec<Vec<bool>> = (0..l).map(|i| (0..l).map(|j| i == j).collect()).collect();
    for &k in chunks {
        dep = (0..l)
            .map(|i| {
                (0..l)
                    .map(|j| (0..l).any(|m| m / k == i / k && dep[m][j]))
                    .collect()
            })
            .collect();
    }
    dep
}

#[test]
fn criterion_3_receptive_field_composition() {
    let started = Instant::now();
    let (l, width, d, h) = (12, 3, 8, 1e-4);
    let chunks = [3, 4];
    let model = ChunkFormer::new(encoder(width, l, d, 2, &chunks), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let seq = random_seq(&mut rng, l, width);
    let mut measured = vec![vec![false; l]; l];
    for j in 0..l {
        for c in 0..width {
            let shifted = |delta: f64| {
                let mut s = seq.clone();
                s.values.data_mut()[j * width + c] += delta;
                encode(&model, &s)
            };
            let (plus, minus) = (shifted(h), shifted(-h));
            for i in 0..l {
                let reach = (i * d..(i + 1) * d).any(|e| ((plus[e] - minus[e]) / (2.0 * h)).abs() > 1e-12);
                measured[i][j] |= reach;
            }
        }
    }
    let analytic = analytic_dependencies(l, &chunks);
    let edges = analytic.iter().flatten().filter(|&&b| b).count();
    let mismatches: Vec<String> = (0..l)
        .flat_map(|i| (0..l).map(move |j| (i, j)))
        .filter(|&(i, j)| measured[i][j] != analytic[i][j])
        .map(|(i, j)| format!("({i},{j})"))
        .collect();
    let outcome = if mismatches.is_empty() {
        Ok(format!("{edges} of {} pairs dependent, pattern matches", l * l))
    } else {
        Err(format!("mismatched pairs {}", mismatches.join(" ")))
    };
    report(3, "receptive-field composition", started.elapsed(), Duration::from_secs(30), outcome);
}

fn batch_loss(model: &ChunkFormer, batch: &Batch) -> f64 {
    let mut tape = Tape::inference();
    let pv = model.params.register(&mut tape);
    let logits = model.forward_batch(&mut tape, &pv, batch, &mut ForwardCtx::eval()).unwrap();
    let (targets, weights) = model.config.prediction_mode.targets(batch);
    let loss = tape
        .weighted_bce_with_logits(logits, &targets, Some(&weights), 1.0)
        .unwrap();
    tape.value(loss).item().unwrap()
}

#[test]
fn criterion_4_gradient_correctness() {
    let started = Instant::now();
    let h = 1e-5;
    let modes = [PredictionMode::LastPosition, PredictionMode::PerPosition, PredictionMode::Pooled];
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let seeds = 5u64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = InputFeature {
            name: "event".into(),
            vocab_size: 6,
            dim: 4,
        };
        let mut cfg = ChunkFormerConfig::standard(vec![input], 12, 8, &[3, 4]);
        for s in &mut cfg.stages {
            s.block.heads = 2;
            s.block.dropout = 0.0;
            s.block.d_ff = 16;
        }
        cfg.prediction_mode = modes[seed as usize % modes.len()];
        let mut model = ChunkFormer::new(cfg, seed).unwrap();
        let lens = [12usize, 9];
        let steps: Vec<Vec<Vec<usize>>> = lens
            .iter()
            .map(|&n| (0..n).map(|_| vec![rng.random_range(1..6)]).collect())
            .collect();
        let targets: Vec<Vec<f64>> = lens
            .iter()
            .map(|&n| (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect())
            .collect();
        let batch = Batch::from_steps(
            steps.iter().zip(&targets).map(|(s, t)| (s.as_slice(), t.as_slice())),
            12,
            1,
        )
        .unwrap();

        let mut tape = Tape::new();
        let pv = model.params.register(&mut tape);
        let logits = model.forward_batch(&mut tape, &pv, &batch, &mut ForwardCtx::eval()).unwrap();
        let (t, w) = model.config.prediction_mode.targets(&batch);
        let loss = tape.weighted_bce_with_logits(logits, &t, Some(&w), 1.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<Tensor> = pv.all().iter().map(|&v| grads.wrt(&tape, v)).collect();

        let ids: Vec<_> = model.params.ids().collect();
        for (id, a) in ids.into_iter().zip(&analytic) {
            for e in 0..a.len() {
                let original = model.params.get(id).data()[e];
                model.params.get_mut(id).data_mut()[e] = original + h;
                let up = batch_loss(&model, &batch);
                model.params.get_mut(id).data_mut()[e] = original - h;
                let down = batch_loss(&model, &batch);
                model.params.get_mut(id).data_mut()[e] = original;
                let numeric = (up - down) / (2.0 * h);
                let g = a.data()[e];
                let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    let outcome = if worst <= 1e-4 {
        Ok(format!("{checked} coordinates over {seeds} seeds, worst relative error {worst:.2e}"))
    } else {
        Err(format!("worst relative error {worst:.2e} > 1e-4"))
    };
    report(4, "gradient correctness", started.elapsed(), Duration::from_secs(60), outcome);
}

#[test]
fn criterion_5_footprint_law() {
    let started = Instant::now();
    let mut failures = Vec::new();
    let mut summary = Vec::new();
    for l in [180usize, 240, 480, 720] {
        let case = BenchCase {
            seq_len: l,
            d_model: 32,
            heads: 4,
            variant: Variant::Chunked {
                chunk_sizes: vec![3, 4],
            },
            batch: 1,
            repetitions: 3,
            backward: false,
        };
        let r = measure_footprint(&case, 1).unwrap();
        for (s, k) in r.stages.iter().zip([3usize, 4]) {
            if s.measured != k * l {
                failures.push(format!("L={l} k={k}: measured {} != {}", s.measured, k * l));
            }
        }
        let expected_ratio = (l * l) as f64 / (4 * l) as f64;
        if r.full_attention != l * l || r.ratio_to_full != expected_ratio {
            failures.push(format!("L={l}: ratio {} != {expected_ratio}", r.ratio_to_full));
        }
        summary.push(format!("L={l}: {}/{} ratio {}", 3 * l, 4 * l, r.ratio_to_full));
    }
    let outcome = if failures.is_empty() {
        Ok(summary.join(", "))
    } else {
        Err(failures.join("; "))
    };
    report(5, "footprint law", started.elapsed(), Duration::from_secs(60), outcome);
}

fn pairwise_auc(scores: &[f64], labels: &[f64]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (sp, _) in scores.iter().zip(labels).filter(|(_, &y)| y == 1.0) {
        for (sn, _) in scores.iter().zip(labels).filter(|(_, &y)| y == 0.0) {
            pairs += 1.0;
            if sp > sn {
                wins += 1.0;
            } else if sp == sn {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn direct_macro_f1(preds: &[f64], labels: &[f64]) -> f64 {
    let f1 = |class: f64| {
        let tp = preds.iter().zip(labels).filter(|&(&p, &y)| p == class && y == class).count() as f64;
        let predicted = preds.iter().filter(|&&p| p == class).count() as f64;
        let actual = labels.iter().filter(|&&y| y == class).count() as f64;
        if predicted + actual == 0.0 {
            0.0
        } else {
            2.0 * tp / (predicted + actual)
        }
    };
    (f1(0.0) + f1(1.0)) / 2.0
}

#[test]
fn criterion_6_metric_oracles() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let (mut worst_auc, mut worst_f1) = (0.0f64, 0.0f64);
    for case in 0..100 {
        let n = rng.random_range(2..=50);
        let mut labels: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect();
        labels[0] = 0.0;
        labels[1] = 1.0;
        let levels = if case % 2 == 0 { 5 } else { 1000 };
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..levels)) / 7.0).collect();
        worst_auc = worst_auc.max((auc(&scores, &labels).unwrap() - pairwise_auc(&scores, &labels)).abs());

        let n = rng.random_range(1..=50);
        let labels: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect();
        let preds: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect();
        worst_f1 = worst_f1.max((macro_f1(&preds, &labels).unwrap() - direct_macro_f1(&preds, &labels)).abs());
    }
    let outcome = if worst_auc <= 1e-12 && worst_f1 <= 1e-12 {
        Ok(format!("100 cases each, max |diff| auc {worst_auc:.1e}, macro F1 {worst_f1:.1e}"))
    } else {
        Err(format!("max |diff| auc {worst_auc:e}, macro F1 {worst_f1:e}"))
    };
    report(6, "metric oracles", started.elapsed(), Duration::from_secs(10), outcome);
}

#[test]
fn criterion_7_preprocessing_fidelity() {
    let started = Instant::now();
    let mut failures = Vec::new();
    let (lo, hi) = (0.012, 3.752);
    let codes = (discretize(hi, lo, hi, 0.001).unwrap(), discretize(lo, lo, hi, 0.001).unwrap());
    if codes != (3752, 12) {
        failures.push(format!("discretized codes {codes:?}"));
    }

    let mut rows = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for g in 0..60 {
        let size = g % 5;
        for t in 0..size {
            rows.push(vec![format!("g{g}"), t.to_string(), format!("{:.3}", rng.random_range(lo..hi)), "0".into()]);
        }
    }
    let table = RawTable::new(["key", "t", "value", "label"].map(String::from).to_vec(), rows).unwrap();
    let cfg = PipelineConfig {
        key_column: "key".into(),
        time_column: "t".into(),
        label_column: "label".into(),
        features: vec![FeatureSpec {
            name: "value".into(),
            kind: FeatureKind::Numeric { precision: 0.001 },
            dim: None,
        }],
        max_vocab: 10_000,
        min_group_size: 2,
        split: SplitSpec::Fractions {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        },
        nonfinite: NonFinitePolicy::Drop,
    };
    let (_, ds) = preprocess(&table, &cfg, 7).unwrap();
    let expected_groups = (0..60).filter(|g| g % 5 >= 2).count();
    if ds.groups.len() != expected_groups || ds.groups.iter().any(|g| g.len() < 2) {
        failures.push(format!("{} groups kept, expected {expected_groups}", ds.groups.len()));
    }
    let splits = assignment(&ds);
    let mut seen = std::collections::BTreeMap::new();
    for split in Split::ALL {
        for g in ds.split(split) {
            if let Some(other) = seen.insert(g.key.clone(), split) {
                failures.push(format!("group {} in {other} and {split}", g.key));
            }
            if splits[&g.key] != split {
                failures.push(format!("group {} assignment disagrees", g.key));
            }
        }
    }
    let outcome = if failures.is_empty() {
        Ok(format!(
            "codes {} and {}, {expected_groups} of 60 groups kept, {} groups in disjoint splits",
            codes.1,
            codes.0,
            seen.len()
        ))
    } else {
        Err(failures.join("; "))
    };
    report(7, "preprocessing fidelity", started.elapsed(), Duration::from_secs(10), outcome);
}

struct SyntheticRun {
    metrics: Vec<u8>,
    best_auc: f64,
    final_auc: f64,
    auc_at_5: f64,
    epochs: usize,
}

fn synthetic_run(dir: &Path, kind: ModelKind) -> SyntheticRun {
    let mut cfg = RunConfig::synthetic(1);
    cfg.model.kind = kind;
    cfg.paths = cfg.paths.resolve(dir);
    cfg.validate().unwrap();
    run::synthesize(&cfg).unwrap();
    run::preprocess(&cfg).unwrap();
    run::train(&cfg, false).unwrap();
    let path = cfg.paths.run.join("metrics.jsonl");
    let history = run::read_metrics(&path).unwrap();
    let aucs: Vec<f64> = history
        .iter()
        .map(|r| r.val.as_ref().and_then(|v| v.auc).unwrap_or(f64::NAN))
        .collect();
    SyntheticRun {
        metrics: std::fs::read(&path).unwrap(),
        best_auc: aucs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        final_auc: *aucs.last().unwrap(),
        auc_at_5: aucs.iter().take(5).cloned().fold(f64::NEG_INFINITY, f64::max),
        epochs: history.len(),
    }
}

#[test]
fn criteria_8_and_9_synthetic_end_to_end_and_determinism() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let model = synthetic_run(&dir.path().join("chunkformer"), ModelKind::Chunkformer);
    let baseline = synthetic_run(&dir.path().join("baseline"), ModelKind::MeanPool);
    let outcome8 = if model.epochs <= 10 && model.best_auc >= 0.90 && model.best_auc >= baseline.best_auc + 0.02 {
        Ok(format!(
            "val AUC {:.4} (final {:.4}, best of first 5 epochs {:.4}) vs mean-pool baseline {:.4} (final {:.4}) in {} epochs",
            model.best_auc, model.final_auc, model.auc_at_5, baseline.best_auc, baseline.final_auc, model.epochs
        ))
    } else {
        Err(format!(
            "val AUC {:.4} vs baseline {:.4} in {} epochs",
            model.best_auc, baseline.best_auc, model.epochs
        ))
    };
    let elapsed8 = started.elapsed();

    let started9 = Instant::now();
    let again = synthetic_run(&dir.path().join("repeat"), ModelKind::Chunkformer);
    let outcome9 = if again.metrics == model.metrics {
        Ok(format!("{} byte metric logs identical", model.metrics.len()))
    } else {
        Err("metric logs differ".into())
    };

    let elapsed9 = started9.elapsed();
    let limit = Duration::from_secs(15 * 60);
    let line8 = std::panic::catch_unwind(|| report(8, "synthetic end-to-end", elapsed8, limit, outcome8));
    report(9, "determinism", elapsed9, limit, outcome9);
    if let Err(e) = line8 {
        std::panic::resume_unwind(e);
    }
}
