use std::path::Path;

use refilter::context_encoder::FeatureCache;
use refilter::corpus::{load_corpus, synth, write_jsonl, Corpus};
use refilter::evaluation::{
    export_weights, run_latency, run_noise, run_shuffle, write_csv, write_weights, Condition, EvalReport, Lab,
    Method, Trained,
};
use refilter::retriever::InvertedIndex;
use refilter::training::load_checkpoint;
use refilter::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;

fn lab(cfg: &RunConfig, out: &Path) -> Result<Lab> {
    Lab::new(cfg.lab.clone(), Some(&cfg.backbone_cache(out)))
}

fn trained(cfg: &RunConfig, checkpoint: &Path) -> Result<Trained> {
    if !checkpoint.exists() {
        return Err(Error::io(checkpoint, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let t = Trained::from_checkpoint(load_checkpoint(checkpoint)?)?;
    let f = &t.model.cfg.fusion;
    if f.k != cfg.fusion.k || f.s != cfg.fusion.s {
        return Err(Error::Config(format!(
            "field `fusion.k`/`fusion.s` = {}/{} but {} was trained with {}/{}",
            cfg.fusion.k,
            cfg.fusion.s,
            checkpoint.display(),
            f.k,
            f.s
        )));
    }
    Ok(t)
}

/// The lab around a trained model, reusing the backbone stored with it.
fn lab_for(cfg: &RunConfig, t: &Trained) -> Result<Lab> {
    Lab::with_backbone(cfg.lab.clone(), t.store.clone())
}

fn summary<T: Serialize>(out: &Path, name: &str, value: &T) -> Result<()> {
    let path = out.join(name);
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn report_line(r: &EvalReport) {
    println!(
        "{:<40} EM {:.3}  F1 {:.3}  recall {:.3}  ({} questions)",
        r.condition.tag(),
        r.mean_em,
        r.mean_f1,
        r.recall,
        r.records.len()
    );
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = synth::generate(&cfg.lab.synth)?;
    write_jsonl(&out.join("corpus.jsonl"), &data.documents)?;
    write_jsonl(&out.join("qa.jsonl"), &data.qa)?;
    write_jsonl(&out.join("noise.jsonl"), &data.noise)?;
    println!(
        "{} documents, {} questions, {} noise documents -> {}",
        data.documents.len(),
        data.qa.len(),
        data.noise.len(),
        out.display()
    );
    Ok(())
}

fn chunked(cfg: &RunConfig, corpus: &Path, chunk_len: usize) -> Result<Corpus> {
    let docs = load_corpus(corpus)?;
    let vocab = Lab::vocabulary(&cfg.lab)?;
    Corpus::from_documents(&docs, chunk_len, &vocab, false)
}

pub fn index(cfg: &RunConfig, corpus: &Path, out: &Path) -> Result<()> {
    let chunks = chunked(cfg, corpus, cfg.lab.synth.chunk_len)?;
    let index = InvertedIndex::build(chunks.chunks())?;
    index.save(&out.join("index.bin"))?;
    write_jsonl(&out.join("chunks.jsonl"), chunks.chunks())?;
    println!("{} chunks, {} terms, mean length {:.1}", index.len(), index.num_terms(), index.avg_len());
    Ok(())
}

pub fn cache(cfg: &RunConfig, corpus: &Path, checkpoint: &Path, out: &Path) -> Result<()> {
    let t = trained(cfg, checkpoint)?;
    let enc = &t.model.encoder;
    let chunks = chunked(cfg, corpus, enc.cfg.chunk_len)?;
    let stamp = enc.stamp(&t.store);
    let mut cache = FeatureCache::new(stamp, enc.cfg.d_e, enc.cfg.chunk_len);
    for part in chunks.chunks().chunks(64) {
        let rows: Vec<&[u32]> = part.iter().map(|c| c.token_ids.as_slice()).collect();
        for (c, f) in part.iter().zip(enc.encode_values(&t.store, &rows)?) {
            cache.put(&c.chunk_id, stamp, f)?;
        }
    }
    cache.save(&out.join("features.bin"), &chunks)?;
    println!("{} chunk features (stamp {:016x})", cache.len(), cache.stamp);
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    best_dev_em: Option<f64>,
    best_epoch: Option<usize>,
    test_em: f64,
    test_f1: f64,
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let lab = lab(cfg, out)?;
    let t = lab.train_refilter(cfg.fusion.clone(), &cfg.train, Some(out))?;
    let cond = Condition::clean(Method::ReFilter, cfg.fusion.k, cfg.seed);
    let r = lab.evaluate(Some(&t), &lab.test_qa, &cond)?;
    report_line(&r);
    let best = t.outcome.last.best.as_ref();
    summary(
        out,
        "summary.json",
        &TrainSummary {
            steps: t.outcome.last.step,
            best_dev_em: best.map(|b| b.dev_metric),
            best_epoch: best.map(|b| b.epoch),
            test_em: r.mean_em,
            test_f1: r.mean_f1,
        },
    )?;
    println!("checkpoints and metrics -> {}", out.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig, experiment: &str, checkpoint: Option<&Path>, features: Option<&Path>, out: &Path) -> Result<()> {
    let seed = cfg.seed;
    let cond = |method| Condition {
        method,
        k: cfg.fusion.k,
        noise_fraction: cfg.eval.noise_fraction,
        shuffled: cfg.eval.shuffle,
        seed,
    };
    let method = match experiment {
        "s-rag" => Some(Method::SRag),
        "closed-book" => Some(Method::ClosedBook),
        "refilter" | "noise" | "shuffle" => None,
        other => {
            return Err(Error::Config(format!(
                "unknown experiment `{other}` (refilter, s-rag, closed-book, noise, shuffle)"
            )))
        }
    };
    if let Some(m) = method {
        let lab = match checkpoint {
            Some(c) => lab_for(cfg, &trained(cfg, c)?)?,
            None => lab(cfg, out)?,
        };
        let r = lab.evaluate(None, &lab.test_qa, &cond(m))?;
        r.write(out, experiment)?;
        report_line(&r);
        return summary(out, "summary.json", &(r.mean_em, r.mean_f1));
    }
    let checkpoint =
        checkpoint.ok_or_else(|| Error::Config(format!("experiment `{experiment}` needs --checkpoint")))?;
    let mut t = trained(cfg, checkpoint)?;
    let lab = lab_for(cfg, &t)?;
    match experiment {
        "noise" => {
            let (rows, reports) = run_noise(&lab, &t, &cfg.eval.noise_fractions, seed)?;
            for r in &reports {
                r.write(out, experiment)?;
                report_line(r);
            }
            write_csv(&out.join("noise.csv"), &rows)
        }
        "shuffle" => {
            let rows = run_shuffle(&lab, &t, seed)?;
            for r in &rows {
                println!(
                    "{:<12} ordered {:.3}  shuffled {:.3}  mean |delta| {:.3}",
                    r.method.to_string(),
                    r.ordered_em,
                    r.shuffled_em,
                    r.mean_abs_delta
                );
            }
            write_csv(&out.join("shuffle.csv"), &rows)
        }
        _ => {
            if let Some(path) = features {
                if cfg.eval.noise_fraction > 0.0 {
                    log::warn!("noise chunks are not in the feature cache; encoding on the fly");
                } else {
                    t.cache = Some(FeatureCache::load(path, &lab.corpus)?);
                }
            }
            let r = lab.evaluate(Some(&t), &lab.test_qa, &cond(Method::ReFilter))?;
            r.write(out, experiment)?;
            report_line(&r);
            summary(out, "summary.json", &(r.mean_em, r.mean_f1))
        }
    }
}

pub fn bench(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let t = trained(cfg, checkpoint)?;
    let lab = lab_for(cfg, &t)?;
    let rows = run_latency(&lab, &t, &cfg.bench, cfg.seed)?;
    println!("{:<12} {:>5} {:>10} {:>10} {:>10} {:>8}", "method", "batch", "ms/query", "ttft ms", "tok/s", "prompt");
    for r in &rows {
        println!(
            "{:<12} {:>5} {:>10.3} {:>10.3} {:>10.1} {:>8.1}",
            r.method.to_string(),
            r.batch_size,
            r.per_query_ms_p50,
            r.ttft_ms,
            r.tokens_per_sec,
            r.prompt_tokens
        );
    }
    write_csv(&out.join("latency.csv"), &rows)
}

pub fn visualize(cfg: &RunConfig, checkpoint: &Path, query: Option<usize>, out: &Path) -> Result<()> {
    let t = trained(cfg, checkpoint)?;
    let lab = lab_for(cfg, &t)?;
    let qa = match query {
        Some(i) => vec![lab
            .test_qa
            .get(i)
            .cloned()
            .ok_or_else(|| Error::Index(format!("query {i} of {} test questions", lab.test_qa.len())))?],
        None => lab.test_qa.clone(),
    };
    let rows = export_weights(&lab, &t, &qa, cfg.eval.noise_fraction, cfg.seed)?;
    write_weights(&out.join("weights.jsonl"), &rows)?;
    write_csv(&out.join("weights.csv"), &rows)?;
    if query.is_some() {
        println!("{}", qa[0].question);
        for r in rows.iter().filter(|r| !r.is_pad) {
            let mark = if r.is_answer { " <- answer" } else { "" };
            println!("  L{} rank {} {:<12} gamma {:.4}  W_t {:.4}{mark}", r.layer, r.rank, r.token, r.gamma, r.w_t);
        }
    }
    println!("{} weight rows -> {}", rows.len(), out.join("weights.jsonl").display());
    Ok(())
}

#[derive(Serialize)]
struct TuneRow {
    lambda: f64,
    best_dev_em: f64,
    test_em: f64,
    final_mean_gate: f64,
}

pub fn tune(cfg: &RunConfig, out: &Path) -> Result<()> {
    let lab = lab(cfg, out)?;
    let mut rows = Vec::new();
    for &lambda in &cfg.tune.lambdas {
        let train = refilter::training::TrainConfig { lambda, ..cfg.train.clone() };
        let dir = out.join(format!("lambda-{lambda}"));
        let t = lab.train_refilter(cfg.fusion.clone(), &train, Some(&dir))?;
        let r = lab.evaluate(Some(&t), &lab.test_qa, &Condition::clean(Method::ReFilter, cfg.fusion.k, cfg.seed))?;
        let row = TuneRow {
            lambda,
            best_dev_em: t.outcome.last.best.as_ref().map_or(f64::NAN, |b| b.dev_metric),
            test_em: r.mean_em,
            final_mean_gate: t.outcome.log().last().map_or(f64::NAN, |m| m.mean_gate),
        };
        println!("lambda {:<6} dev EM {:.3}  test EM {:.3}  mean gate {:.4}", lambda, row.best_dev_em, row.test_em, row.final_mean_gate);
        rows.push(row);
    }
    write_csv(&out.join("tune.csv"), &rows)
}
