//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

use std::fs;
use std::process::Command;
use std::time::Instant;

use anssel::data::{build_bibleqa, parse_bible, parse_trivia, ContextMode, DatasetSpec, QuestionGroup, Translation};
use anssel::embeddings::{cosine, train_cbow, CbowConfig, EmbeddedSequence};
use anssel::evaluation::{evaluate, f1_top1, mrr, random_baseline, PredictionSet, QuestionScores};
use anssel::models::{Model, ModelConfig, ModelKind, Readout};
use anssel::synthetic::{bible_fixture, two_cluster_corpus, SeparableTask};
use anssel::tensor::{grad_check, Graph, ParamVars, ParameterSet, Tensor, TensorError, Var};
use anssel::training::{
    load_checkpoint, predictions, save_checkpoint, train, transfer_weights, Checkpoint, Featurizer, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Seeded values with magnitude in `[0.1, 1)`.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen::<bool>() { m } else { -m }
        })
        .collect()
}

fn sequence(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> EmbeddedSequence {
    EmbeddedSequence::from_rows(Tensor::matrix(rows, dim, uniform(rng, rows * dim)).unwrap())
}

fn weighted_sum<'g>(v: Var<'g>) -> Result<Var<'g>, TensorError> {
    let shape = v.shape();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.5 + (i as f64 + 2.0).ln()).collect();
    let mut out = v.mul(v.graph().leaf(Tensor::new(shape, w)?))?;
    while !out.shape().is_empty() {
        out = out.sum(0)?;
    }
    Ok(out)
}

fn single(name: &str, t: Tensor) -> ParameterSet {
    let mut p = ParameterSet::new();
    p.insert(name, t).unwrap();
    p
}

fn op_error<F>(f: F, p: &ParameterSet) -> Result<f64, String>
where
    F: for<'g> Fn(&'g Graph, &ParamVars<'g>) -> Result<Var<'g>, TensorError>,
{
    grad_check::<_, TensorError>(f, p, 1e-5).map_err(fail)
}

/// Model-level checks use a step of 1e-4. At 1e-5 the round-off in the
/// central difference (about 1e-11 absolute) is comparable to the smallest
/// BiDAF gradients (about 1e-8), so the relative error measures noise
/// rather than the backward pass. Both figures are reported.
const MODEL_EPS: f64 = 1e-4;

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_model: f64 = 0.0;
    let mut worst_fine: f64 = 0.0;
    for kind in ModelKind::ALL {
        for readout in [Readout::FinalState, Readout::MaxPool] {
            for trial in 0..3 {
                let cfg = ModelConfig {
                    embedding_dim: 4,
                    hidden: 3,
                    filters: 3,
                    window: 2,
                    dropout: 0.0,
                    readout,
                };
                let model = Model::new(kind, cfg, trial).map_err(fail)?;
                let q_len = rng.gen_range(1..=6);
                let a_len = rng.gen_range(1..=6);
                let q = sequence(&mut rng, q_len, 4);
                let a = sequence(&mut rng, a_len, 4);
                let label = [f64::from(trial as u8 % 2)];
                let check = |eps| {
                    grad_check::<_, anssel::models::ModelError>(
                        |g, v| Ok(model.forward(g, v, &q, &a, None)?.bce(&label)?),
                        model.params(),
                        eps,
                    )
                    .map_err(fail)
                };
                worst_model = worst_model.max(check(MODEL_EPS)?);
                worst_fine = worst_fine.max(check(1e-5)?);
            }
        }
    }

    let mut worst_op: f64 = 0.0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (r, c, k) = (rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=5));
        let mut p = ParameterSet::new();
        p.insert("a", Tensor::matrix(r, c, away_from_zero(&mut rng, r * c)).unwrap()).unwrap();
        p.insert("b", Tensor::matrix(r, c, away_from_zero(&mut rng, r * c)).unwrap()).unwrap();
        p.insert("w", Tensor::matrix(c, k, away_from_zero(&mut rng, c * k)).unwrap()).unwrap();
        let errs = [
            op_error(|_, v| weighted_sum(v.get("a")?.add(v.get("b")?)?), &p)?,
            op_error(|_, v| weighted_sum(v.get("a")?.sub(v.get("b")?)?), &p)?,
            op_error(|_, v| weighted_sum(v.get("a")?.mul(v.get("b")?)?), &p)?,
            op_error(|_, v| weighted_sum(v.get("a")?.matmul(v.get("w")?)?), &p)?,
            op_error(|_, v| weighted_sum(v.get("a")?.sigmoid()?), &p)?,
            op_error(|_, v| weighted_sum(v.get("a")?.tanh()?), &p)?,
            op_error(|_, v| weighted_sum(v.get("a")?.relu()?), &p)?,
            op_error(|_, v| weighted_sum(v.get("a")?.softmax()?), &p)?,
            op_error(|_, v| weighted_sum(v.get("a")?.sum(0)?), &p)?,
            op_error(|_, v| weighted_sum(v.get("a")?.mean(1)?), &p)?,
            op_error(|_, v| weighted_sum(v.get("a")?.concat(v.get("b")?, 1)?), &p)?,
            op_error(|_, v| weighted_sum(v.get("a")?.transpose()?), &p)?,
            op_error(|_, v| weighted_sum(v.get("a")?.row(r - 1)?), &p)?,
        ];
        worst_op = errs.iter().cloned().fold(worst_op, f64::max);

        let distinct: Vec<f64> = (0..r * c).map(|i| ((i * 7) % (r * c)) as f64 * 0.3 - 1.0).collect();
        let m = single("m", Tensor::matrix(r, c, distinct).unwrap());
        worst_op = worst_op.max(op_error(|_, v| weighted_sum(v.get("m")?.max(0)?), &m)?);
        let z = single("z", Tensor::matrix(r, 1, away_from_zero(&mut rng, r)).unwrap());
        let labels: Vec<f64> = (0..r).map(|i| (i % 2) as f64).collect();
        worst_op = worst_op.max(op_error(|_, v| v.get("z")?.sigmoid()?.bce(&labels), &z)?);
    }
    ensure(
        worst_model < 1e-4 && worst_op < 1e-6,
        format!(
            "model max rel err {worst_model:.2e} at eps 1e-4 (< 1e-4; {worst_fine:.2e} at eps 1e-5), \
             per-op max rel err {worst_op:.2e} at eps 1e-5 (< 1e-6)"
        ),
    )
}

fn uniform_groups(n: usize, candidates: usize) -> Vec<QuestionGroup> {
    let task = SeparableTask {
        candidates,
        ..SeparableTask::default()
    };
    task.groups("b", n, 5)
}

fn baseline() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for (candidates, want_mrr, want_f1) in [(3, 0.611, 0.333), (10, 0.293, 0.10)] {
        let r = evaluate(&random_baseline(&uniform_groups(5000, candidates), 17).map_err(fail)?).map_err(fail)?;
        ok &= (r.mrr - want_mrr).abs() <= 0.02 && (r.f1 - want_f1).abs() <= 0.02;
        lines.push(format!("{candidates} candidates: MRR {:.3} F1 {:.3}", r.mrr, r.f1));
    }
    ensure(ok, lines.join("; "))
}

fn learnability() -> Outcome {
    let task = SeparableTask::default();
    let emb = task.embeddings(&["s"], 16, 0.3, 1);
    let f = Featurizer {
        embeddings: &emb,
        max_question_len: 8,
        max_answer_len: 8,
    };
    let train_g = f.prepare_all(&task.groups("s", 500, 11));
    let val_g = f.prepare_all(&task.groups("s", 50, 12));
    let test_raw = task.groups("s", 100, 13);
    let test_g = f.prepare_all(&test_raw);
    let cfg = ModelConfig {
        embedding_dim: 16,
        hidden: 16,
        filters: 16,
        window: 3,
        dropout: 0.0,
        readout: Readout::FinalState,
    };
    let tc = TrainConfig {
        learning_rate: 0.05,
        max_epochs: 50,
        patience: 10,
        ..TrainConfig::default()
    };
    let mut ok = true;
    let mut lines = Vec::new();
    for kind in ModelKind::ALL {
        let out = train(Model::new(kind, cfg.clone(), 1).map_err(fail)?, &train_g, &val_g, &tc).map_err(fail)?;
        let f1 = f1_top1(&predictions(&out.model, &test_g).map_err(fail)?).map_err(fail)?.0;
        ok &= f1 >= 0.9 && out.history.len() <= 50;
        lines.push(format!("{kind} F1 {f1:.3} ({} epochs)", out.history.len()));
    }
    let base = f1_top1(&random_baseline(&test_raw, 1).map_err(fail)?).map_err(fail)?.0;
    // 100 groups is too few for a tight Monte-Carlo estimate, so average
    // over independent draws as well.
    let mut draws = 0.0;
    for seed in 0..50 {
        draws += f1_top1(&random_baseline(&test_raw, seed).map_err(fail)?).map_err(fail)?.0;
    }
    let mean = draws / 50.0;
    ok &= (mean - 1.0 / 3.0).abs() <= 0.05;
    lines.push(format!("baseline F1 mean of 50 draws {mean:.3} (single draw {base:.3})"));
    ensure(ok, lines.join(", "))
}

fn transfer() -> Outcome {
    let task = SeparableTask::default();
    let emb = task.embeddings(&["s", "t"], 16, 1.0, 1);
    let f = Featurizer {
        embeddings: &emb,
        max_question_len: 8,
        max_answer_len: 8,
    };
    let cfg = ModelConfig {
        embedding_dim: 16,
        hidden: 16,
        filters: 16,
        window: 3,
        dropout: 0.0,
        readout: Readout::FinalState,
    };
    let mut lines = Vec::new();
    let (mut with, mut without) = (0.0, 0.0);
    let kinds = [ModelKind::Rnn, ModelKind::Cnn];
    for kind in kinds {
        let (mut kw, mut ko) = (0.0, 0.0);
        for seed in 0..5u64 {
            let src = f.prepare_all(&task.groups("s", 1000, 100 + seed));
            let src_val = f.prepare_all(&task.groups("s", 100, 200 + seed));
            let tgt = f.prepare_all(&task.groups("t", 50, 300 + seed));
            let tgt_val = f.prepare_all(&task.groups("t", 20, 400 + seed));
            let test = f.prepare_all(&task.groups("t", 200, 500 + seed));
            let pre_cfg = TrainConfig {
                learning_rate: 0.05,
                max_epochs: 10,
                patience: 3,
                seed,
                ..TrainConfig::default()
            };
            let fine_cfg = TrainConfig {
                max_epochs: 20,
                ..pre_cfg.clone()
            };
            let fresh = || Model::new(kind, cfg.clone(), 1000 + seed).map_err(fail);
            let pre = train(Model::new(kind, cfg.clone(), seed).map_err(fail)?, &src, &src_val, &pre_cfg)
                .map_err(fail)?
                .model;
            let (init, _) = transfer_weights(&Checkpoint::from_model(&pre), fresh()?).map_err(fail)?;
            let a = train(init, &tgt, &tgt_val, &fine_cfg).map_err(fail)?.model;
            let b = train(fresh()?, &tgt, &tgt_val, &fine_cfg).map_err(fail)?.model;
            kw += f1_top1(&predictions(&a, &test).map_err(fail)?).map_err(fail)?.0;
            ko += f1_top1(&predictions(&b, &test).map_err(fail)?).map_err(fail)?.0;
        }
        lines.push(format!("{kind} {:.3} vs {:.3}", kw / 5.0, ko / 5.0));
        with += kw;
        without += ko;
    }
    let n = (5 * kinds.len()) as f64;
    ensure(
        with / n >= without / n,
        format!("mean F1 with transfer {:.3} vs without {:.3} ({})", with / n, without / n, lines.join(", ")),
    )
}

fn dataset() -> Outcome {
    let fx = bible_fixture(6, 8, 886, 4);
    let corpus = parse_bible(fx.bible_tsv.as_bytes()).map_err(fail)?;
    let questions = parse_trivia(fx.trivia_tsv.as_bytes(), Some(&corpus)).map_err(fail)?;
    let mut lines = vec![format!("{} questions (fixture)", questions.len())];
    let mut ok = questions.len() == 886;
    for mode in [ContextMode::Window(3), ContextMode::Window(10), ContextMode::Chapter] {
        let spec = DatasetSpec {
            mode,
            translations: Translation::ALL.to_vec(),
        };
        let groups = build_bibleqa(&corpus, &questions, &spec).map_err(fail)?;
        ok &= groups.len() == 3544;
        let mut full = 0;
        for (g, q) in groups.iter().zip(questions.iter().flat_map(|q| std::iter::repeat(q).take(4))) {
            ok &= g.candidates.iter().filter(|c| c.label == 1).count() == 1;
            let book: usize = q.book[4..].parse().map_err(fail)?;
            let chapter_len = fx.chapters[book - 1][q.chapter as usize - 1];
            let want = match mode {
                ContextMode::Window(n) => n.min(chapter_len),
                ContextMode::Chapter => chapter_len,
            };
            ok &= g.candidates.len() == want;
            if let ContextMode::Window(n) = mode {
                full += usize::from(chapter_len >= n && g.candidates.len() == n);
            }
        }
        let detail = match mode {
            ContextMode::Window(n) => format!("window-{n}: {} groups, {full} with {n} candidates", groups.len()),
            ContextMode::Chapter => format!("chapter: {} groups", groups.len()),
        };
        lines.push(detail);
    }
    ensure(ok, lines.join(", "))
}

fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let p = PredictionSet {
            questions: (0..rng.gen_range(1..=10))
                .map(|i| {
                    let n = rng.gen_range(1..=10);
                    QuestionScores {
                        id: format!("q{i}"),
                        // Coarse grid so ties occur.
                        scores: (0..n).map(|_| f64::from(rng.gen_range(0u8..5)) / 4.0).collect(),
                        gold: rng.gen_range(0..n),
                    }
                })
                .collect(),
        };
        let mut hits = 0.0;
        let mut rr = 0.0;
        for q in &p.questions {
            let mut order: Vec<usize> = (0..q.scores.len()).collect();
            order.sort_by(|&a, &b| q.scores[b].partial_cmp(&q.scores[a]).unwrap().then(a.cmp(&b)));
            if order[0] == q.gold {
                hits += 1.0;
            }
            rr += 1.0 / (order.iter().position(|&i| i == q.gold).unwrap() + 1) as f64;
        }
        let n = p.questions.len() as f64;
        let (f1, _, _) = f1_top1(&p).map_err(fail)?;
        let m = mrr(&p).map_err(fail)?;
        if f1 != hits / n || m != rr / n {
            return Err(format!("disagreement: f1 {f1} vs {}, mrr {m} vs {}", hits / n, rr / n));
        }
    }
    Ok("100 prediction sets agree exactly".into())
}

fn serialization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let small = |dim| ModelConfig {
        embedding_dim: dim,
        hidden: 5,
        filters: 6,
        window: 3,
        dropout: 0.5,
        readout: Readout::FinalState,
    };
    let mut ok = true;
    for kind in ModelKind::ALL {
        let model = Model::new(kind, small(8), 3).map_err(fail)?;
        let bytes = save_checkpoint(&model);
        let back = load_checkpoint(&bytes).map_err(fail)?;
        ok &= back == model && save_checkpoint(&back) == bytes;

        let (copy, _) = transfer_weights(&Checkpoint::from_model(&model), Model::new(kind, small(8), 99).map_err(fail)?)
            .map_err(fail)?;
        for _ in 0..20 {
            let (ql, al) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
            let (q, a) = (sequence(&mut rng, ql, 8), sequence(&mut rng, al, 8));
            ok &= model.score(&q, &a).map_err(fail)? == copy.score(&q, &a).map_err(fail)?;
        }

        let narrow = Model::new(kind, small(100), 4).map_err(fail)?;
        let (wide, report) = transfer_weights(&Checkpoint::from_model(&narrow), Model::new(kind, small(300), 5).map_err(fail)?)
            .map_err(fail)?;
        ok &= report.skipped.is_empty();
        for _ in 0..5 {
            let (ql, al) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
            let (q, a) = (sequence(&mut rng, ql, 100), sequence(&mut rng, al, 100));
            let widen = |s: &EmbeddedSequence| {
                let mut data = Vec::new();
                for r in 0..s.max_len() {
                    data.extend_from_slice(s.values.row(r));
                    data.extend_from_slice(&[0.0; 200]);
                }
                EmbeddedSequence::from_rows(Tensor::matrix(s.max_len(), 300, data).unwrap())
            };
            ok &= narrow.score(&q, &a).map_err(fail)? == wide.score(&widen(&q), &widen(&a)).map_err(fail)?;
        }
    }
    ensure(ok, "bitwise round trip, 20 identical transfer outputs, 100 -> 300 outputs unchanged for all models".into())
}

fn embeddings() -> Outcome {
    let corpus = two_cluster_corpus(10, 400, 8, 3);
    let cfg = CbowConfig {
        dim: 16,
        window: 2,
        epochs: 5,
        ..CbowConfig::default()
    };
    let out = train_cbow(&corpus, &cfg).map_err(fail)?;
    let again = train_cbow(&corpus, &cfg).map_err(fail)?;
    let v = |w: String| out.matrix.vector(&w).unwrap().to_vec();
    let (mut within, mut across, mut nw, mut na) = (0.0, 0.0, 0, 0);
    for i in 0..10 {
        for j in 0..10 {
            for (x, y) in [("a", "a"), ("b", "b")] {
                if i != j {
                    within += cosine(&v(format!("{x}{i}")), &v(format!("{y}{j}")));
                    nw += 1;
                }
            }
            across += cosine(&v(format!("a{i}")), &v(format!("b{j}")));
            na += 1;
        }
    }
    let gap = within / nw as f64 - across / na as f64;
    ensure(
        gap >= 0.2 && out.final_loss < out.initial_loss && again.matrix == out.matrix,
        format!(
            "cosine gap {gap:.3}, loss {:.4} -> {:.4}, deterministic {}",
            out.initial_loss,
            out.final_loss,
            again.matrix == out.matrix
        ),
    )
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(fail)?;
    let d = dir.path();
    let task = SeparableTask::default();
    let mut buf = Vec::new();
    anssel::data::write_groups(&mut buf, &task.groups("s", 40, 1)).map_err(fail)?;
    fs::write(d.join("s.jsonl"), buf).map_err(fail)?;
    let mut buf = Vec::new();
    task.embeddings(&["s"], 6, 0.3, 1).write_text(&mut buf).map_err(fail)?;
    fs::write(d.join("s.vec"), buf).map_err(fail)?;

    let run = |args: &[&str]| -> Result<Vec<u8>, String> {
        let out = Command::new(env!("CARGO_BIN_EXE_anssel")).current_dir(d).args(args).output().map_err(fail)?;
        if !out.status.success() {
            return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
        }
        Ok(out.stdout)
    };
    let read = |p: &str| fs::read(d.join(p)).map_err(fail);
    let mut same = true;
    for kind in ["rnn", "cnn", "bidaf"] {
        for tag in ["1", "2"] {
            let (ckpt, report) = (format!("{kind}{tag}.ckpt"), format!("{kind}{tag}.json"));
            run(&[
                "train", "--model", kind, "--data", "s.jsonl", "--embeddings", "s.vec", "--hidden", "4", "--filters",
                "4", "--max-epochs", "2", "--seed", "5", "--out", &ckpt, "--report", &report,
            ])?;
        }
        same &= read(&format!("{kind}1.ckpt"))? == read(&format!("{kind}2.ckpt"))?;
        same &= read(&format!("{kind}1.json"))? == read(&format!("{kind}2.json"))?;
        let ckpt = format!("{kind}1.ckpt");
        let eval = [
            "evaluate", "--model", kind, "--data", "s.jsonl", "--checkpoint", &ckpt, "--embeddings", "s.vec",
        ];
        same &= run(&eval)? == run(&eval)?;
    }
    let base = ["evaluate", "--model", "baseline", "--data", "s.jsonl", "--seed", "3"];
    same &= run(&base)? == run(&base)?;
    ensure(same, "train and evaluate reruns byte-identical for every model and the baseline".into())
}

fn main() {
    let started = Instant::now();
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", gradients),
        ("random baseline", baseline),
        ("learnability", learnability),
        ("transfer direction", transfer),
        ("dataset construction", dataset),
        ("metric oracles", oracles),
        ("serialization", serialization),
        ("embedding quality", embeddings),
        ("determinism", cli_determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let result = check();
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed in {:.1}s",
        criteria.len() - failed,
        criteria.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
