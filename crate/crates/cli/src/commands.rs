use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use latmem::autoenc::{decode_from_latent, encode_latent, DecodePrompt};
use latmem::config::RunConfig;
use latmem::datakit::{
    build_reconstruction_pool, chunk_references, generate_bounded_paragraphs, generate_synthetic_paragraphs, load_jsonl,
    write_jsonl, QaRecord,
};
use latmem::evalkit::{
    assignment_map, compression_csv, compression_sweep, forgetting_csv, forgetting_curve, hit_permutation_test,
    noise_sweep, ranking_metrics, reconstruct_with, AssignmentMap, MetricSummary,
    RankingReport, ReconSettings,
};
use latmem::io::write_atomic;
use latmem::memstore::{MemoryCodec, MemoryStore};
use latmem::model::{load_checkpoint, read_checkpoint_info, save_checkpoint, BackboneWeights, Model, Role, WeightMode};
use latmem::numerics::Matrix;
use latmem::quant::{nf4_dequantize, nf4_quantize};
use latmem::tokenizer::{decode_tokens, encode_text, TokenId};
use latmem::training::{run_alignment_stage, run_substitution_stage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::{Cli, Command};

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let ctx = Ctx { cfg };
    match &cli.command {
        Command::GenData { from } => ctx.gen_data(from.as_deref()),
        Command::TrainAlign { backbone } => ctx.train_align(backbone.as_deref()),
        Command::TrainSub => ctx.train_sub(),
        Command::Encode { text } => ctx.encode(text),
        Command::Decode { latent } => ctx.decode(latent),
        Command::Reconstruct { text } => ctx.reconstruct(text),
        Command::Quantize { text } => ctx.quantize(text),
        Command::StoreInsert { text, corpus } => ctx.store_insert(text, *corpus),
        Command::StoreRetrieve { query, top_k, decode } => ctx.store_retrieve(query, *top_k, *decode),
        Command::EvalRecon => ctx.eval_recon(),
        Command::EvalRetrieval => ctx.eval_retrieval(),
        Command::NoiseSweep => ctx.noise_sweep(),
        Command::CompressSweep => ctx.compress_sweep(),
        Command::ForgetSim => ctx.forget_sim(),
        Command::AssignMap { sentences } => ctx.assign_map(*sentences),
        Command::CkptInfo { path } => ctx.ckpt_info(path.as_deref()),
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let base = RunConfig::profile(&cli.profile)?;
    let cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            RunConfig::from_toml_over(&base, &text).with_context(|| format!("invalid config {}", p.display()))?
        }
        None => base,
    };
    Ok(cfg.with_overrides(&cli.overrides)?)
}

struct Ctx {
    cfg: RunConfig,
}

/// Training inputs and held-out texts, both as token sequences.
struct Corpus {
    records: Vec<QaRecord>,
    train: Vec<Vec<TokenId>>,
    eval: Vec<Vec<TokenId>>,
    /// Index of the first eval record.
    eval_start: usize,
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.cfg.train.seed
    }

    /// Run id: disabled components, then the seed.
    fn tag(&self) -> String {
        let a = &self.cfg.ablation;
        let mut parts: Vec<&str> = Vec::new();
        for (on, name) in [(a.st, "wo_st"), (a.pt, "wo_pt"), (a.ps, "wo_ps"), (a.sq, "wo_sq")] {
            if !on {
                parts.push(name);
            }
        }
        parts.push("");
        format!("{}seed{}", parts.join("-"), self.seed())
    }

    fn stage1_path(&self) -> PathBuf {
        self.cfg.paths.checkpoints.join(format!("stage1-seed{}.ckpt", self.seed()))
    }

    fn stage2_path(&self) -> PathBuf {
        let a = &self.cfg.ablation;
        let variant = match (a.pt, a.ps) {
            (false, _) => "wo_pt-",
            (true, false) => "wo_ps-",
            (true, true) => "",
        };
        self.cfg.paths.checkpoints.join(format!("stage2-{variant}seed{}.ckpt", self.seed()))
    }

    fn report_path(&self, command: &str, ext: &str) -> PathBuf {
        self.cfg.paths.reports.join(format!("{command}-{}.{ext}", self.tag()))
    }

    fn meta(&self) -> Result<Value> {
        Ok(serde_json::to_value(&self.cfg)?)
    }

    /// Writes `<command>-<run id>.json` holding the resolved config and
    /// `body`, plus the CSV when one is given.
    fn report(&self, command: &str, body: Value, csv: Option<&str>) -> Result<()> {
        std::fs::create_dir_all(&self.cfg.paths.reports)?;
        let mut doc = json!({ "command": command, "seed": self.seed(), "config": self.meta()? });
        doc["result"] = body;
        if let Some(csv) = csv {
            let p = self.report_path(command, "csv");
            write_atomic(&p, csv.as_bytes())?;
            doc["csv"] = json!(p.display().to_string());
        }
        let mut bytes = serde_json::to_vec_pretty(&doc)?;
        bytes.push(b'\n');
        write_atomic(&self.report_path(command, "json"), &bytes)?;
        Ok(())
    }

    fn load_model(&self, path: &Path) -> Result<Model> {
        if !path.exists() {
            bail!("missing checkpoint {}", path.display());
        }
        let (model, _) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
        if let Some(field) = model.config().first_difference(&self.cfg.model) {
            bail!(
                "checkpoint {} does not match the configured model: field `model.{field}` differs",
                path.display()
            );
        }
        Ok(model)
    }

    /// The trained encoder-decoder pair.
    fn codec_model(&self) -> Result<Model> {
        self.load_model(&self.stage2_path())
    }

    fn recon_settings(&self) -> ReconSettings {
        ReconSettings {
            latent_len: self.cfg.train.latent_len,
            codec: self.cfg.codec_options(),
            max_output: self.cfg.eval.max_output,
        }
    }

    fn memory_codec(&self) -> MemoryCodec {
        MemoryCodec {
            latent_len: self.cfg.train.latent_len,
            codec: self.cfg.codec_options(),
            quantize: self.cfg.quant.enable,
            quant: self.cfg.quant_options(),
            capacity: self.cfg.capacity(),
            max_output: self.cfg.eval.max_output,
        }
    }

    fn load_corpus(&self) -> Result<Corpus> {
        let path = &self.cfg.paths.corpus;
        if !path.exists() {
            bail!("missing corpus {} (run gen-data first)", path.display());
        }
        let records = load_jsonl(path)?;
        let n_eval = self.cfg.data.eval_paragraphs;
        if records.len() <= n_eval {
            bail!("corpus has {} records but {n_eval} are reserved for evaluation", records.len());
        }
        let eval_start = records.len() - n_eval;
        let chunks = |recs: &[QaRecord]| -> Result<Vec<Vec<TokenId>>> {
            let mut out = Vec::new();
            for r in recs {
                for text in &r.references {
                    out.extend(chunk_references(text, self.cfg.data.max_tokens)?);
                }
            }
            Ok(out)
        };
        Ok(Corpus {
            train: chunks(&records[..eval_start])?,
            eval: chunks(&records[eval_start..])?,
            eval_start,
            records,
        })
    }

    fn eval_texts(&self, corpus: &Corpus) -> Result<Vec<String>> {
        corpus
            .eval
            .iter()
            .take(self.cfg.eval.samples)
            .map(|s| decode_tokens(s).map_err(Into::into))
            .collect()
    }

    fn gen_data(&self, from: Option<&Path>) -> Result<()> {
        let d = &self.cfg.data;
        let records: Vec<QaRecord> = match from {
            None => generate_bounded_paragraphs(
                d.train_paragraphs + d.eval_paragraphs,
                (d.min_sentences, d.max_sentences),
                d.max_tokens,
                d.seed,
            )?
            .iter()
            .map(|p| QaRecord {
                question: p.query(0),
                answers: vec![p.facts[0].values.join(" ")],
                references: vec![p.text()],
                hit_list: Some(vec![0]),
            })
            .collect(),
            Some(src) => build_reconstruction_pool(&load_jsonl(src)?, d.gap, d.seed)?
                .into_iter()
                .map(|text| QaRecord {
                    question: String::new(),
                    answers: Vec::new(),
                    references: vec![text],
                    hit_list: None,
                })
                .collect(),
        };
        if let Some(dir) = self.cfg.paths.corpus.parent() {
            std::fs::create_dir_all(dir)?;
        }
        write_jsonl(&self.cfg.paths.corpus, &records)?;
        let tokens: usize = records.iter().flat_map(|r| &r.references).map(String::len).sum();
        println!("wrote {} records ({tokens} tokens) to {}", records.len(), self.cfg.paths.corpus.display());
        self.report(
            "gen-data",
            json!({ "records": records.len(), "tokens": tokens, "corpus": self.cfg.paths.corpus.display().to_string() }),
            None,
        )
    }

    fn train_align(&self, backbone: Option<&Path>) -> Result<()> {
        let corpus = self.load_corpus()?;
        let stage = self.cfg.stage_config();
        let mut model = match stage.mode {
            WeightMode::Full => Model::new_full(self.cfg.model.clone(), self.seed())?,
            WeightMode::Adapter => {
                let base = match backbone {
                    Some(p) => self.load_model(p)?.role_weights(Role::Decoder)?.effective().into_owned(),
                    None => BackboneWeights::init(&self.cfg.model, &mut ChaCha8Rng::seed_from_u64(self.seed())),
                };
                Model::new_adapter(self.cfg.model.clone(), base, self.cfg.adapter.adapter_config(), self.seed())?
            }
        };
        let trace = run_alignment_stage(&mut model, &corpus.train, &corpus.eval, &stage)?;
        std::fs::create_dir_all(&self.cfg.paths.checkpoints)?;
        let path = self.stage1_path();
        save_checkpoint(&path, &model, &self.meta()?)?;
        let last = trace.records().last().map(|r| r.loss);
        println!("stage 1 done: final eval loss {last:?}; checkpoint {}", path.display());
        self.report(
            "train-align",
            json!({ "checkpoint": path.display().to_string(), "final_eval_loss": last }),
            Some(&trace.to_csv()),
        )
    }

    fn train_sub(&self) -> Result<()> {
        let corpus = self.load_corpus()?;
        let mut model = self.load_model(&self.stage1_path())?;
        let csv = if self.cfg.ablation.pt {
            let trace = run_substitution_stage(&mut model, &corpus.train, &corpus.eval, &self.cfg.stage_config())?;
            trace.to_csv()
        } else {
            model.init_encoder_from_decoder()?;
            String::from("phase,epoch,batch,split,loss\n")
        };
        let path = self.stage2_path();
        save_checkpoint(&path, &model, &self.meta()?)?;
        println!("stage 2 done; checkpoint {}", path.display());
        self.report(
            "train-sub",
            json!({ "checkpoint": path.display().to_string(), "trained": self.cfg.ablation.pt }),
            Some(&csv),
        )
    }

    fn encode(&self, text: &str) -> Result<()> {
        let model = self.codec_model()?;
        let h = encode_latent(&model, &encode_text(text), self.cfg.train.latent_len, self.cfg.codec_options())?;
        let body = latent_json(&h.rows);
        println!("encoded {} tokens into a {}x{} latent", h.source_len, h.rows.rows(), h.rows.cols());
        self.report("encode", json!({ "text": text, "latent": body }), None)?;
        println!("{}", self.report_path("encode", "json").display());
        Ok(())
    }

    fn decode(&self, latent: &Path) -> Result<()> {
        let model = self.codec_model()?;
        let doc: Value = serde_json::from_slice(&std::fs::read(latent)?)?;
        let m = doc.get("result").and_then(|r| r.get("latent")).unwrap_or(&doc);
        let h = latent_from_json(m).with_context(|| format!("reading latent from {}", latent.display()))?;
        let out = decode_from_latent(
            &model,
            &h,
            &DecodePrompt::for_options(self.cfg.codec_options(), self.cfg.eval.max_output),
        )?;
        let text = decode_tokens(&out.tokens)?;
        println!("{text}");
        self.report("decode", json!({ "text": text, "truncated": out.truncated }), None)
    }

    fn reconstruct(&self, text: &str) -> Result<()> {
        let model = self.codec_model()?;
        let (pred, report) = reconstruct_with(&model, text, &self.recon_settings(), |h| Ok(h.clone()))?;
        println!("{pred}");
        println!("{}", serde_json::to_string(&report)?);
        self.report("reconstruct", json!({ "input": text, "output": pred, "metrics": report }), None)
    }

    fn quantize(&self, text: &str) -> Result<()> {
        let model = self.codec_model()?;
        let h = encode_latent(&model, &encode_text(text), self.cfg.train.latent_len, self.cfg.codec_options())?.rows;
        let q = nf4_quantize(&h, self.cfg.quant_options())?;
        let back = nf4_dequantize(&q)?;
        let err = h.max_abs_diff(&back);
        let dense_bytes = h.len() * 4;
        println!(
            "{}x{} latent: {} bytes quantized vs {dense_bytes} dense; max abs error {err:.6}",
            q.rows,
            q.cols,
            q.storage_bytes()
        );
        self.report(
            "quantize",
            json!({
                "rows": q.rows,
                "cols": q.cols,
                "indices": q.indices(),
                "scales": q.scales,
                "storage_bytes": q.storage_bytes(),
                "dense_bytes": dense_bytes,
                "max_abs_error": err,
            }),
            None,
        )
    }

    fn open_store(&self) -> Result<MemoryStore> {
        let p = &self.cfg.paths.store;
        Ok(if p.exists() { MemoryStore::load(p)? } else { MemoryStore::new() })
    }

    fn store_insert(&self, texts: &[String], from_corpus: bool) -> Result<()> {
        let model = self.codec_model()?;
        let codec = self.memory_codec();
        let mut texts = texts.to_vec();
        if from_corpus {
            let corpus = self.load_corpus()?;
            texts.extend(self.eval_texts(&corpus)?);
        }
        if texts.is_empty() {
            bail!("nothing to insert: pass --text or --corpus");
        }
        let chunk = self.cfg.eval.chunk_size.min(codec.capacity);
        let mut store = self.open_store()?;
        let mut ids = Vec::new();
        for t in &texts {
            for c in chunk_references(t, chunk)? {
                ids.push(store.insert(&model, &codec, &decode_tokens(&c)?)?);
            }
        }
        if let Some(dir) = self.cfg.paths.store.parent() {
            std::fs::create_dir_all(dir)?;
        }
        store.save(&self.cfg.paths.store)?;
        println!("inserted {} records; store holds {}", ids.len(), store.len());
        self.report("store-insert", json!({ "ids": ids, "store_len": store.len() }), None)
    }

    fn store_retrieve(&self, query: &str, top_k: Option<usize>, decode: bool) -> Result<()> {
        let model = self.codec_model()?;
        let codec = self.memory_codec();
        let store = self.open_store()?;
        if store.is_empty() {
            bail!("store {} is empty", self.cfg.paths.store.display());
        }
        let hits = store.retrieve(&model, &codec, query, top_k.unwrap_or(self.cfg.eval.k))?;
        let mut csv = String::from("rank,id,score,text\n");
        for (rank, (id, score)) in hits.iter().enumerate() {
            let text = &store.get(*id)?.text;
            println!("{}\t{id}\t{score:.6}\t{text}", rank + 1);
            let _ = writeln!(csv, "{},{id},{score},{}", rank + 1, csv_quote(text));
        }
        let decoded = match (decode, hits.first()) {
            (true, Some((id, _))) => {
                let t = store.fetch_decode(&model, &codec, *id)?;
                println!("decoded: {t}");
                Some(t)
            }
            _ => None,
        };
        self.report("store-retrieve", json!({ "query": query, "hits": hits, "decoded": decoded }), Some(&csv))
    }

    fn eval_recon(&self) -> Result<()> {
        let model = self.codec_model()?;
        let texts = self.eval_texts(&self.load_corpus()?)?;
        let rs = self.recon_settings();
        let quant = self.cfg.quant_options();
        let mut dense = Vec::new();
        let mut quantized = Vec::new();
        for t in &texts {
            dense.push(reconstruct_with(&model, t, &rs, |h| Ok(h.clone()))?.1);
            quantized.push(reconstruct_with(&model, t, &rs, |h| Ok(nf4_dequantize(&nf4_quantize(h, quant)?)?))?.1);
        }
        let (d, q) = (MetricSummary::of(&dense), MetricSummary::of(&quantized));
        let csv = format!(
            "latent,{}\ndense,{}\nnf4,{}\n",
            MetricSummary::CSV_HEADER,
            d.csv_fields(),
            q.csv_fields()
        );
        print!("{csv}");
        self.report("eval-recon", json!({ "dense": d, "nf4": q }), Some(&csv))
    }

    fn eval_retrieval(&self) -> Result<()> {
        let model = self.codec_model()?;
        let codec = self.memory_codec();
        let corpus = self.load_corpus()?;
        let k = self.cfg.eval.k;
        let chunk = self.cfg.eval.chunk_size.min(codec.capacity);
        let mut store = MemoryStore::new();
        let mut queries: Vec<(String, Vec<u64>)> = Vec::new();
        let mut selfq: Vec<(String, u64)> = Vec::new();
        let recs = &corpus.records[corpus.eval_start..];
        for r in recs.iter().take(self.cfg.eval.samples) {
            let mut ids = Vec::new();
            for text in &r.references {
                let mut ref_ids = Vec::new();
                for c in chunk_references(text, chunk)? {
                    let t = decode_tokens(&c)?;
                    let id = store.insert(&model, &codec, &t)?;
                    selfq.push((t, id));
                    ref_ids.push(id);
                }
                ids.push(ref_ids);
            }
            if !r.question.is_empty() {
                let relevant: Vec<u64> = match &r.hit_list {
                    Some(h) => h.iter().flat_map(|&i| ids[i].iter().copied()).collect(),
                    None => ids.iter().flatten().copied().collect(),
                };
                if !relevant.is_empty() {
                    queries.push((r.question.clone(), relevant));
                }
            }
        }
        let rank_all = |q: &str| -> Result<Vec<u64>> {
            Ok(store.retrieve(&model, &codec, q, store.len())?.into_iter().map(|r| r.0).collect())
        };
        let mut self_hits = 0usize;
        for (t, id) in &selfq {
            if rank_all(t)?.first() == Some(id) {
                self_hits += 1;
            }
        }
        let self_at_1 = self_hits as f64 / selfq.len().max(1) as f64;
        let mut rankings = Vec::new();
        let mut relevant = Vec::new();
        let mut reports = Vec::new();
        let mut csv = format!("query,{}\n", RankingReport::CSV_HEADER);
        for (q, rel) in &queries {
            let ranked = rank_all(q)?;
            let rep = ranking_metrics(&ranked, rel, k)?;
            let _ = writeln!(csv, "{},{}", csv_quote(q), rep.csv_fields());
            reports.push(rep);
            rankings.push(ranked);
            relevant.push(rel.clone());
        }
        let mean = RankingReport::mean(&reports);
        let _ = writeln!(csv, "mean,{}", mean.csv_fields());
        let perm = if queries.len() >= 2 {
            Some(hit_permutation_test(&rankings, &relevant, k, self.cfg.eval.permutation_rounds, self.seed())?)
        } else {
            None
        };
        println!("self@1 {self_at_1:.4}; {} queries; mean hit@{k} {:.4}", queries.len(), mean.hit);
        if let Some((_, p)) = perm {
            println!("permutation p-value {p:.6}");
        }
        self.report(
            "eval-retrieval",
            json!({
                "records": store.len(),
                "self_at_1": self_at_1,
                "mean": mean,
                "permutation_p": perm.map(|x| x.1),
            }),
            Some(&csv),
        )
    }

    fn noise_sweep(&self) -> Result<()> {
        let model = self.codec_model()?;
        let texts = self.eval_texts(&self.load_corpus()?)?;
        let seeds: Vec<u64> = (0..self.cfg.eval.noise_seeds as u64).map(|i| self.seed() * 1000 + i).collect();
        let table = noise_sweep(
            &model,
            &texts,
            &self.recon_settings(),
            &self.cfg.eval.sigmas,
            &seeds,
            self.cfg.quant_options(),
        )?;
        let csv = table.to_csv();
        print!("{csv}");
        self.report("noise-sweep", serde_json::to_value(&table)?, Some(&csv))
    }

    fn compress_sweep(&self) -> Result<()> {
        let model = self.codec_model()?;
        let texts = self.eval_texts(&self.load_corpus()?)?;
        let rows = compression_sweep(&model, &texts, &self.recon_settings(), &self.cfg.eval.length_edges)?;
        let csv = compression_csv(&rows);
        print!("{csv}");
        self.report("compress-sweep", serde_json::to_value(&rows)?, Some(&csv))
    }

    fn forget_sim(&self) -> Result<()> {
        let model = self.codec_model()?;
        let codec = self.memory_codec();
        let texts = self.eval_texts(&self.load_corpus()?)?;
        let mut store = MemoryStore::new();
        for t in &texts {
            for c in chunk_references(t, codec.capacity)? {
                store.insert(&model, &codec, &decode_tokens(&c)?)?;
            }
        }
        let rows = forgetting_curve(&model, &store, &codec, self.cfg.eval.forget_a, self.cfg.eval.forget_steps as u32)?;
        let csv = forgetting_csv(&rows);
        print!("{csv}");
        self.report("forget-sim", serde_json::to_value(&rows)?, Some(&csv))
    }

    fn assign_map(&self, sentences: usize) -> Result<()> {
        if sentences < 2 {
            bail!("--sentences must be at least 2");
        }
        let model = self.codec_model()?;
        let n = self.cfg.eval.samples.max(1);
        let paragraphs = generate_synthetic_paragraphs(n, (sentences, sentences), self.cfg.data.seed ^ 0x5eed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed());
        let mut total: Option<AssignmentMap> = None;
        for p in &paragraphs {
            let orig = p.sentences();
            let subs: Vec<String> = (0..orig.len()).map(|i| p.with_substituted(i, &mut rng).sentence(i)).collect();
            let m = assignment_map(&model, &orig, &subs, self.cfg.train.latent_len, self.cfg.codec_options())?;
            total = Some(match total {
                None => m,
                Some(mut acc) => {
                    for (ra, rb) in acc.map.iter_mut().zip(&m.map) {
                        ra.iter_mut().zip(rb).for_each(|(a, b)| *a += b);
                    }
                    acc.control.iter_mut().zip(&m.control).for_each(|(a, b)| *a += b);
                    acc
                }
            });
        }
        let mut avg = total.expect("at least one paragraph");
        let scale = 1.0 / paragraphs.len() as f64;
        avg.map.iter_mut().flatten().for_each(|v| *v *= scale);
        avg.control.iter_mut().for_each(|v| *v *= scale);
        let csv = avg.to_csv();
        print!("{csv}");
        println!("diagonal fraction {:.4}", avg.diagonal_fraction());
        self.report(
            "assign-map",
            json!({ "paragraphs": paragraphs.len(), "map": avg, "diagonal_fraction": avg.diagonal_fraction() }),
            Some(&csv),
        )
    }

    fn ckpt_info(&self, path: Option<&Path>) -> Result<()> {
        let path = path.map(Path::to_path_buf).unwrap_or_else(|| self.stage2_path());
        if !path.exists() {
            bail!("missing checkpoint {}", path.display());
        }
        let info = read_checkpoint_info(&path)?;
        let file_len = std::fs::metadata(&path)?.len();
        let mut csv = String::from("name,rows,cols,offset,bytes\n");
        let mut expected = 0u64;
        let mut consistent = true;
        for t in &info.tensors {
            let bytes = (t.shape[0] * t.shape[1] * 4) as u64;
            consistent &= t.offset == expected;
            expected += bytes;
            let _ = writeln!(csv, "{},{},{},{},{bytes}", t.name, t.shape[0], t.shape[1], t.offset);
        }
        consistent &= info.data_start + expected == file_len;
        print!("{csv}");
        println!(
            "mode {:?}; roles {:?}; {} tensors; manifest {}",
            info.mode,
            info.roles,
            info.tensors.len(),
            if consistent { "consistent with file layout" } else { "INCONSISTENT with file layout" }
        );
        self.report(
            "ckpt-info",
            json!({
                "path": path.display().to_string(),
                "model": info.config,
                "mode": info.mode,
                "roles": info.roles,
                "tensors": info.tensors.len(),
                "data_start": info.data_start,
                "file_bytes": file_len,
                "consistent": consistent,
            }),
            Some(&csv),
        )?;
        if !consistent {
            bail!("checkpoint manifest does not match the file layout");
        }
        Ok(())
    }
}

fn latent_json(h: &Matrix) -> Value {
    json!({ "rows": h.rows(), "cols": h.cols(), "data": h.data() })
}

fn latent_from_json(v: &Value) -> Result<Matrix> {
    let rows = v["rows"].as_u64().context("latent.rows")? as usize;
    let cols = v["cols"].as_u64().context("latent.cols")? as usize;
    let data: Vec<f32> = serde_json::from_value(v["data"].clone()).context("latent.data")?;
    Ok(Matrix::from_vec(rows, cols, data)?)
}

fn csv_quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
