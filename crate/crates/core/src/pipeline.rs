//! Stage orchestration over a working directory of datasets, checkpoints and
//! a `report.json` of named scalar metrics.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::backbones::{pretrain_backbones, FrozenBundle};
use crate::checkpoint;
use crate::config::Config;
use crate::data::{build_splits, read_dataset, write_dataset, ImageSample, SceneSpec, TextVocab};
use crate::error::{Result, SeedError};
use crate::eval::{recall_at_k, semantic_consistency, AttributeHits, ConsistencyReport, RetrievalReport};
use crate::lm::{
    caption_perplexity, caption_report, compose_pairs, imagine_report, next_code_accuracy, pretrain_toy_lm,
    train_multimodal, LanguageModel, MultimodalModel, VisualTokenizer,
};
use crate::qformer::{embed_images, train_stage1, QFormer};
use crate::rng::Rng;
use crate::tensor::{matmul_nt, Tensor};
use crate::vq::{codebook_stats, evaluate_stage2, reconstruct_batch, train_stage2, VqModel};

pub type Report = BTreeMap<String, f64>;

pub const RETRIEVAL_KS: [usize; 3] = [1, 5, 10];
pub const ATTRIBUTES: [&str; 4] = ["shape", "color", "cell", "size"];

/// File layout under `paths.workdir`.
#[derive(Clone, Debug)]
pub struct Workdir {
    pub root: PathBuf,
}

impl Workdir {
    pub fn new(cfg: &Config) -> Self {
        Self { root: cfg.paths.workdir.clone() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn train_data(&self) -> PathBuf {
        self.path("train.bin")
    }

    pub fn heldout_data(&self) -> PathBuf {
        self.path("heldout.bin")
    }

    pub fn backbones(&self) -> PathBuf {
        self.path("backbones.ckpt")
    }

    pub fn qformer(&self) -> PathBuf {
        self.path("qformer.ckpt")
    }

    pub fn vq(&self) -> PathBuf {
        self.path("vq.ckpt")
    }

    pub fn lm(&self) -> PathBuf {
        self.path("lm.ckpt")
    }

    pub fn multimodal(&self) -> PathBuf {
        self.path("mm.ckpt")
    }

    pub fn report(&self) -> PathBuf {
        self.path("report.json")
    }
}

pub fn read_report(path: &Path) -> Result<Report> {
    match fs::read_to_string(path) {
        Ok(text) => Ok(serde_json::from_str(&text)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Report::new()),
        Err(e) => Err(e.into()),
    }
}

pub fn write_report(path: &Path, report: &Report) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(report)? + "\n")?;
    Ok(())
}

/// Adds `entries` to the report at `path`, overwriting equal keys.
pub fn merge_report(path: &Path, entries: &Report) -> Result<Report> {
    let mut r = read_report(path)?;
    r.extend(entries.iter().map(|(k, v)| (k.clone(), *v)));
    write_report(path, &r)?;
    Ok(r)
}

/// Everything a downstream stage needs from the tokenizer stages.
pub struct Tokenizer {
    pub bundle: FrozenBundle,
    pub qformer: QFormer,
    pub vq: VqModel,
}

impl Tokenizer {
    pub fn view(&self) -> VisualTokenizer<'_> {
        VisualTokenizer { bundle: &self.bundle, qformer: &self.qformer, vq: &self.vq }
    }
}

pub fn load_bundle(cfg: &Config, wd: &Workdir) -> Result<FrozenBundle> {
    FrozenBundle::load(&wd.backbones(), cfg)
}

/// Loads the stage-II artifacts first, so a missing codebook is reported before anything upstream.
pub fn load_tokenizer(cfg: &Config, wd: &Workdir) -> Result<Tokenizer> {
    let vq = VqModel::load(&wd.vq(), cfg)?;
    let bundle = load_bundle(cfg, wd)?;
    let stored = checkpoint::load(&wd.vq(), "codebook.*")?.subset("qformer.");
    let qformer = if stored.is_empty() {
        QFormer::load(&wd.qformer(), cfg)?
    } else {
        QFormer { params: stored, cfg: cfg.qformer.clone() }
    };
    Ok(Tokenizer { bundle, qformer, vq })
}

pub fn load_multimodal(cfg: &Config, wd: &Workdir, text: &TextVocab) -> Result<MultimodalModel> {
    let base = LanguageModel::load(&wd.lm(), cfg, text)?;
    MultimodalModel::load(&wd.multimodal(), base)
}

pub fn gen_data(cfg: &Config, wd: &Workdir) -> Result<(Vec<ImageSample>, Vec<ImageSample>)> {
    let text = TextVocab::new();
    let mut rng = Rng::for_stage(cfg.seed, "data");
    let (train, heldout) = build_splits(cfg.data.train_size, cfg.data.heldout_size, cfg.data.jitter, &text, &mut rng)?;
    write_dataset(&wd.train_data(), &train)?;
    write_dataset(&wd.heldout_data(), &heldout)?;
    log::info!("wrote {} train and {} held-out samples to {}", train.len(), heldout.len(), wd.root.display());
    Ok((train, heldout))
}

pub fn load_data(wd: &Workdir) -> Result<(Vec<ImageSample>, Vec<ImageSample>)> {
    let read = |p: PathBuf| {
        if p.exists() {
            read_dataset(&p)
        } else {
            Err(SeedError::MissingData(p.display().to_string()))
        }
    };
    Ok((read(wd.train_data())?, read(wd.heldout_data())?))
}

fn timed<T>(stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let out = f()?;
    log::info!("{stage} finished in {:.1}s", t.elapsed().as_secs_f64());
    Ok(out)
}

fn captions(samples: &[ImageSample]) -> Vec<Vec<usize>> {
    samples.iter().map(|s| s.caption_ids.clone()).collect()
}

fn retrieval(image: &Tensor<f32>, text: &Tensor<f32>) -> Result<RetrievalReport> {
    let n = image.rows();
    let sim: Vec<f64> = matmul_nt(image.data(), text.data(), n, image.cols(), n).into_iter().map(f64::from).collect();
    let ks: Vec<usize> = RETRIEVAL_KS.iter().copied().filter(|&k| k <= n).collect();
    recall_at_k(&sim, n, &ks)
}

fn retrieval_entries(prefix: &str, r: &RetrievalReport) -> Report {
    let mut out = Report::new();
    for (i, k) in r.ks.iter().enumerate() {
        out.insert(format!("{prefix}.i2t_r{k}"), r.image_to_text[i]);
        out.insert(format!("{prefix}.t2i_r{k}"), r.text_to_image[i]);
    }
    out.insert(format!("{prefix}.r_mean"), r.mean);
    out
}

fn consistency_entries(prefix: &str, r: &ConsistencyReport) -> Report {
    let mut out = Report::new();
    out.insert(format!("{prefix}.mean"), r.mean);
    for (name, acc) in ATTRIBUTES.iter().zip(r.per_attribute) {
        out.insert(format!("{prefix}.{name}"), acc);
    }
    out
}

pub fn stage_backbones(cfg: &Config, wd: &Workdir) -> Result<Report> {
    let (train, heldout) = load_data(wd)?;
    let text = TextVocab::new();
    let mut rng = Rng::for_stage(cfg.seed, "backbones");
    let (bundle, _) = timed("pretrain-backbones", || pretrain_backbones(&train, cfg, &text, &mut rng))?;
    bundle.save(&wd.backbones())?;
    let images: Vec<&Tensor<f32>> = heldout.iter().map(|s| &s.image).collect();
    let r = retrieval(&bundle.image_embed_batch(&images)?, &bundle.text_encode_batch(&captions(&heldout))?)?;
    let mut report = Report::new();
    report.insert("backbones.i2t_r1".into(), r.image_to_text[0]);
    report.insert("backbones.t2i_r1".into(), r.text_to_image[0]);
    let decoded = bundle.decode_images(&bundle.gen_text_encode_batch(&captions(&heldout))?)?;
    let score = decoded.iter().zip(&heldout).map(|(im, s)| semantic_consistency(im, &s.spec)).sum::<f64>();
    report.insert("backbones.decoder_consistency".into(), score / heldout.len().max(1) as f64);
    merge_report(&wd.report(), &report)?;
    Ok(report)
}

pub fn stage_qformer(cfg: &Config, wd: &Workdir) -> Result<Report> {
    let (train, heldout) = load_data(wd)?;
    let bundle = load_bundle(cfg, wd)?;
    let mut rng = Rng::for_stage(cfg.seed, "stage1");
    let (qf, _) = timed("train-qformer", || train_stage1(&train, &heldout, &bundle, cfg, &mut rng))?;
    qf.save(&wd.qformer())?;
    let report = eval_embedding_retrieval(&bundle, &qf, &heldout)?;
    merge_report(&wd.report(), &report)?;
    Ok(report)
}

fn eval_embedding_retrieval(bundle: &FrozenBundle, qf: &QFormer, heldout: &[ImageSample]) -> Result<Report> {
    let images: Vec<&Tensor<f32>> = heldout.iter().map(|s| &s.image).collect();
    let z = qf.final_vectors(&embed_images(bundle, qf, &images)?)?;
    let r = retrieval(&z, &bundle.text_encode_batch(&captions(heldout))?)?;
    Ok(retrieval_entries("retrieval.causal_emb", &r))
}

fn eval_code_retrieval(tok: &Tokenizer, heldout: &[ImageSample]) -> Result<Report> {
    let images: Vec<&Tensor<f32>> = heldout.iter().map(|s| &s.image).collect();
    let seqs = tok.view().tokenize(&images)?;
    let rec = reconstruct_batch(&seqs, &tok.vq.codebook, &tok.vq.params, &tok.vq.dims)?;
    let z = tok.qformer.final_vectors(&rec)?;
    let r = retrieval(&z, &tok.bundle.text_encode_batch(&captions(heldout))?)?;
    Ok(retrieval_entries("retrieval.causal_code", &r))
}

pub fn stage_vq(cfg: &Config, wd: &Workdir) -> Result<Report> {
    let (train, heldout) = load_data(wd)?;
    let bundle = load_bundle(cfg, wd)?;
    let qf = QFormer::load(&wd.qformer(), cfg)?;
    let mut rng = Rng::for_stage(cfg.seed, "stage2");
    let (vq, tuned, _) = timed("train-vq", || train_stage2(&train, &heldout, &qf, &bundle, cfg, &mut rng))?;
    let mut store = vq.params.clone();
    store.merge(vq.codebook.to_params());
    if cfg.vq.tune_qformer {
        store.merge(tuned.params.clone());
    }
    checkpoint::save(&wd.vq(), &store)?;
    let s2 = evaluate_stage2(&heldout, &bundle, &tuned, &qf, &vq)?;
    let tok = Tokenizer { bundle, qformer: tuned, vq };
    let mut report = Report::new();
    report.insert("stage2.mean_cosine".into(), s2.mean_cosine);
    report.insert("stage2.gen_mse".into(), s2.gen_mse);
    report.insert("stage2.perplexity".into(), s2.perplexity);
    report.extend(eval_roundtrip(&tok, &heldout)?);
    merge_report(&wd.report(), &report)?;
    Ok(report)
}

fn eval_roundtrip(tok: &Tokenizer, heldout: &[ImageSample]) -> Result<Report> {
    let view = tok.view();
    let images: Vec<&Tensor<f32>> = heldout.iter().map(|s| &s.image).collect();
    let seqs = view.tokenize(&images)?;
    let stats = codebook_stats(&seqs, tok.vq.codebook.size())?;
    let rec = view.detokenize(&seqs)?;
    let hits: Vec<AttributeHits> =
        rec.iter().zip(heldout).map(|(im, s)| AttributeHits::compare(&crate::eval::inverse_render(im), &s.spec)).collect();
    let mut report = consistency_entries("roundtrip", &ConsistencyReport::from_hits(&hits));
    report.insert("stage2.heldout_dead_codes".into(), stats.dead as f64);
    Ok(report)
}

/// Pretrains the base LM, then trains the multimodal adapters against it.
pub fn stage_lm(cfg: &Config, wd: &Workdir) -> Result<Report> {
    let (train, heldout) = load_data(wd)?;
    let text = TextVocab::new();
    let tok = load_tokenizer(cfg, wd)?;
    let codebook_before = tok.vq.codebook.digest();
    let mut rng = Rng::for_stage(cfg.seed, "lm");
    let (base, _) = timed("lm-pretrain", || pretrain_toy_lm(&captions(&train), &captions(&heldout), &text, cfg, &mut rng))?;
    base.save(&wd.lm())?;
    let base_digest = base.digest();
    let mut report = Report::new();
    report.insert("lm.heldout_perplexity".into(), caption_perplexity(&base, &captions(&heldout))?);
    let mut rng = Rng::for_stage(cfg.seed, "multimodal");
    let (mm, _) = timed("multimodal", || train_multimodal(&train, &heldout, &tok.view(), &base, &text, cfg, &mut rng))?;
    mm.save(&wd.multimodal())?;
    report.insert("multimodal.base_unchanged".into(), f64::from(u8::from(mm.base.digest() == base_digest)));
    report.insert("multimodal.codebook_unchanged".into(), f64::from(u8::from(tok.vq.codebook.digest() == codebook_before)));
    let images: Vec<&Tensor<f32>> = heldout.iter().map(|s| &s.image).collect();
    let seqs = tok.view().tokenize(&images)?;
    let (_, t2i) = compose_pairs(&mm.base.vocab, &text, &seqs, &heldout, tok.view().queries())?;
    report.insert("multimodal.next_code_accuracy".into(), next_code_accuracy(&mm, tok.vq.codebook.entries(), &t2i)?);
    merge_report(&wd.report(), &report)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalKind {
    Retrieval,
    Consistency,
    Caption,
}

/// Held-out evaluation of one protocol, merged into the report.
pub fn evaluate(cfg: &Config, wd: &Workdir, kind: EvalKind) -> Result<Report> {
    let (_, heldout) = load_data(wd)?;
    let report = match kind {
        EvalKind::Retrieval => {
            let tok = load_tokenizer(cfg, wd)?;
            let mut r = eval_embedding_retrieval(&tok.bundle, &tok.qformer, &heldout)?;
            r.extend(eval_code_retrieval(&tok, &heldout)?);
            r
        }
        EvalKind::Consistency => eval_roundtrip(&load_tokenizer(cfg, wd)?, &heldout)?,
        EvalKind::Caption => {
            let text = TextVocab::new();
            let tok = load_tokenizer(cfg, wd)?;
            let mm = load_multimodal(cfg, wd, &text)?;
            let mut r = consistency_entries("caption", &caption_report(&mm, &tok.view(), &text, &heldout)?);
            let specs: Vec<SceneSpec> = heldout.iter().map(|s| s.spec).collect();
            r.extend(consistency_entries("imagine", &imagine_report(&mm, &tok.view(), &text, &specs)?));
            r
        }
    };
    merge_report(&wd.report(), &report)?;
    Ok(report)
}

/// Every stage and evaluation in order, starting from an empty report.
pub fn run_all(cfg: &Config) -> Result<Report> {
    let wd = Workdir::new(cfg);
    if wd.report().exists() {
        fs::remove_file(wd.report())?;
    }
    gen_data(cfg, &wd)?;
    stage_backbones(cfg, &wd)?;
    stage_qformer(cfg, &wd)?;
    stage_vq(cfg, &wd)?;
    stage_lm(cfg, &wd)?;
    for kind in [EvalKind::Retrieval, EvalKind::Consistency, EvalKind::Caption] {
        evaluate(cfg, &wd, kind)?;
    }
    read_report(&wd.report())
}
