//! Stage orchestration with on-disk artifacts.
//!
//! Every stage first looks for its artifact under the output directory and
//! computes (then stores) it only when absent. The directory is bound to one
//! config hash; reusing it with a different config is refused.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::checkpoint::{checkpoint_exists, load_checkpoint, save_checkpoint};
use super::config::{sha256_hex, Method, RunConfig};
use super::report::{self, num, write_csv};
use crate::error::{Error, Result};
use crate::gptq::{accumulate_hessian, gptq_quantize_model, layer_mse_from_hessian, DampReportRow, HessianState};
use crate::landscape::{
    basin_radius, log_radii, radial_profile, sample_unit_direction, segment_profile, unit_grid, weight_distance,
    BasinEstimate, LossProfile, ProbeData,
};
use crate::lm::{
    capture_layer_taps, forward_nll, ingest_corpus, pretrain_base, weight_size_bytes, Parameters, PretrainReport,
    Propagation, TokenDataset,
};
use crate::par;
use crate::qaft::{qaft_train, LrSummary, TraceRow};
use crate::quant::{apply_quantizers, calibrate_model, quantize_model_rtn, ModelQuantizers, QuantFormat};

const HASH_FILE: &str = "config_hash";

/// Weights on the quantizer grid together with the frozen quantizers.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    pub params: Parameters,
    pub quantizers: ModelQuantizers,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub corpus_sha256: String,
    pub seq_len: usize,
    pub pretrain_blocks: usize,
    pub train_blocks: usize,
    pub val_blocks: usize,
    pub test_blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaftRecord {
    pub best_lr: f64,
    pub best_epoch: usize,
    pub best_val_nll: f64,
    pub trace: Vec<TraceRow>,
    pub per_lr: Vec<LrSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMse {
    pub layer: String,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodEval {
    pub format: QuantFormat,
    pub method: Method,
    pub test_nll: f64,
    pub weight_bytes: u64,
    pub layer_mse: Vec<LayerMse>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub full_precision_test_nll: f64,
    pub full_precision_bytes: u64,
    pub entries: Vec<MethodEval>,
}

impl Evaluation {
    pub fn get(&self, format: QuantFormat, method: Method) -> Option<&MethodEval> {
        self.entries.iter().find(|e| e.format == format && e.method == method)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorDistance {
    pub format: QuantFormat,
    pub method: Method,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeResult {
    pub radii: Vec<f64>,
    pub radial: Vec<LossProfile>,
    pub segments: Vec<LossProfile>,
    pub basin: Option<BasinEstimate>,
    /// Why the basin estimate was refused, if it was.
    pub basin_refusal: Option<String>,
    pub distances: Vec<AnchorDistance>,
}

impl LandscapeResult {
    pub fn segment(&self, a: &str, b: &str) -> Option<&LossProfile> {
        self.segments.iter().find(|s| s.anchor_a == a && s.anchor_b == b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportKind {
    Misalignment,
    Tradeoff,
    Landscape,
    QaftTrace,
    GptqDamp,
    All,
}

impl std::str::FromStr for ReportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "misalignment" => ReportKind::Misalignment,
            "tradeoff" => ReportKind::Tradeoff,
            "landscape" => ReportKind::Landscape,
            "qaft-trace" => ReportKind::QaftTrace,
            "gptq-damp" => ReportKind::GptqDamp,
            "all" => ReportKind::All,
            _ => return Err(Error::Config(format!("unknown report {s:?}"))),
        })
    }
}

/// Anchor name of a quantized solution, e.g. `gptq-int3`.
pub fn anchor_name(method: Method, format: QuantFormat) -> String {
    format!("{method}-{format}")
}

pub const BASE_ANCHOR: &str = "w";

fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if !path.is_file() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

pub struct Pipeline {
    cfg: RunConfig,
    hash: String,
    corpus_sha256: String,
    dataset: TokenDataset,
}

impl Pipeline {
    /// Ingests the corpus and binds the output directory to this config.
    pub fn open(cfg: RunConfig) -> Result<Self> {
        let cfg = cfg.validated()?;
        let dataset = ingest_corpus(&cfg.corpus, cfg.model.seq_len, &cfg.data)?;
        let bytes = std::fs::read(&cfg.corpus).map_err(|e| Error::io(&cfg.corpus, e))?;
        let corpus_sha256 = sha256_hex(&bytes);
        let hash = cfg.hash(&corpus_sha256);
        std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
        let marker = cfg.out_dir.join(HASH_FILE);
        match std::fs::read_to_string(&marker) {
            Ok(existing) if existing.trim() != hash => {
                return Err(Error::Config(format!(
                    "{} holds artifacts of config {}; use a fresh output directory",
                    cfg.out_dir.display(),
                    existing.trim()
                )))
            }
            Ok(_) => {}
            Err(_) => {
                std::fs::write(&marker, format!("{hash}\n")).map_err(|e| Error::io(&marker, e))?;
                let resolved = cfg.out_dir.join("config.toml");
                std::fs::write(&resolved, cfg.to_toml()?).map_err(|e| Error::io(&resolved, e))?;
            }
        }
        Ok(Self {
            cfg,
            hash,
            corpus_sha256,
            dataset,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn dataset(&self) -> &TokenDataset {
        &self.dataset
    }

    pub fn out_dir(&self) -> &Path {
        &self.cfg.out_dir
    }

    pub fn checkpoint_stem(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join("checkpoints").join(name)
    }

    fn result_path(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join("results").join(format!("{name}.json"))
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join("reports").join(name)
    }

    fn test_blocks(&self) -> Vec<&[u16]> {
        take(self.dataset.test.blocks(), self.cfg.eval.test_blocks)
    }

    pub fn prep_data(&self) -> Result<DataSummary> {
        let s = DataSummary {
            corpus_sha256: self.corpus_sha256.clone(),
            seq_len: self.cfg.model.seq_len,
            pretrain_blocks: self.dataset.pretrain.len(),
            train_blocks: self.dataset.train.len(),
            val_blocks: self.dataset.val.len(),
            test_blocks: self.dataset.test.len(),
        };
        save_json(&self.result_path("data"), &s)?;
        Ok(s)
    }

    /// The pretrained full-precision model.
    pub fn base(&self) -> Result<Parameters> {
        let stem = self.checkpoint_stem("base");
        if checkpoint_exists(&stem) {
            return Ok(load_checkpoint(&stem)?.params);
        }
        log::info!("pretraining base model");
        let (params, report) = pretrain_base(&self.cfg.model, &self.cfg.pretrain, &self.dataset)?;
        save_checkpoint(&params, None, &stem)?;
        save_json(&self.result_path("pretrain"), &report)?;
        Ok(params)
    }

    pub fn pretrain_report(&self) -> Result<Option<PretrainReport>> {
        load_json(&self.result_path("pretrain"))
    }

    fn load_quantized(&self, name: &str) -> Result<Option<QuantizedModel>> {
        let stem = self.checkpoint_stem(name);
        if !checkpoint_exists(&stem) {
            return Ok(None);
        }
        let ck = load_checkpoint(&stem)?;
        let (_, quantizers) = ck.quantization.ok_or_else(|| Error::Corruption {
            path: stem.clone(),
            detail: "quantized checkpoint without scales".into(),
        })?;
        Ok(Some(QuantizedModel {
            params: ck.params,
            quantizers,
        }))
    }

    pub fn rtn(&self, format: QuantFormat) -> Result<QuantizedModel> {
        let name = anchor_name(Method::Rtn, format);
        if let Some(m) = self.load_quantized(&name)? {
            return Ok(m);
        }
        let (params, quantizers) = quantize_model_rtn(&self.base()?, format)?;
        save_checkpoint(&params, Some((Method::Rtn, &quantizers)), &self.checkpoint_stem(&name))?;
        Ok(QuantizedModel { params, quantizers })
    }

    pub fn gptq(&self, format: QuantFormat) -> Result<(QuantizedModel, Vec<DampReportRow>)> {
        let name = anchor_name(Method::Gptq, format);
        let result = self.result_path(&name);
        if let (Some(m), Some(rows)) = (self.load_quantized(&name)?, load_json(&result)?) {
            return Ok((m, rows));
        }
        log::info!("gptq {format}");
        let base = self.base()?;
        let out = gptq_quantize_model(
            &base,
            &self.dataset.train.blocks(),
            &self.cfg.gptq.damp_grid,
            format,
            self.cfg.gptq.propagation,
        )?;
        save_checkpoint(
            &out.params,
            Some((Method::Gptq, &out.quantizers)),
            &self.checkpoint_stem(&name),
        )?;
        save_json(&result, &out.report)?;
        write_csv(
            &self.report_path(&format!("gptq_damp_{format}.csv")),
            &self.hash,
            &report::GPTQ_DAMP_HEADER,
            &damp_rows(format, &out.report),
        )?;
        Ok((
            QuantizedModel {
                params: out.params,
                quantizers: out.quantizers,
            },
            out.report,
        ))
    }

    pub fn qaft(&self, format: QuantFormat) -> Result<(QuantizedModel, QaftRecord)> {
        let name = anchor_name(Method::Qaft, format);
        let result = self.result_path(&name);
        if let (Some(m), Some(rec)) = (self.load_quantized(&name)?, load_json(&result)?) {
            return Ok((m, rec));
        }
        log::info!("qaft {format}");
        let base = self.base()?;
        let quantizers = calibrate_model(&base, format)?;
        let out = qaft_train(&base, &quantizers, &self.dataset, &self.cfg.qaft, self.cfg.seed)?;
        let params = apply_quantizers(&out.best, &quantizers)?;
        let rec = QaftRecord {
            best_lr: out.best_lr,
            best_epoch: out.best_epoch,
            best_val_nll: out.best_val_nll,
            trace: out.trace,
            per_lr: out.per_lr,
        };
        save_checkpoint(&params, Some((Method::Qaft, &quantizers)), &self.checkpoint_stem(&name))?;
        save_json(&result, &rec)?;
        Ok((QuantizedModel { params, quantizers }, rec))
    }

    pub fn quantized(&self, method: Method, format: QuantFormat) -> Result<QuantizedModel> {
        match method {
            Method::Rtn => self.rtn(format),
            Method::Gptq => self.gptq(format).map(|r| r.0),
            Method::Qaft => self.qaft(format).map(|r| r.0),
        }
    }

    /// Full-precision Hessians of every quantized layer on the calibration blocks.
    fn reference_hessians(&self, base: &Parameters) -> Result<Vec<HessianState>> {
        let blocks = take(self.dataset.train.blocks(), self.cfg.eval.mse_blocks);
        let taps = capture_layer_taps(base, &blocks, Propagation::FullPrecision, None)?;
        par::map(&taps, accumulate_hessian).into_iter().collect()
    }

    /// Test NLL, weight size and per-layer MSE of every configured (format, method).
    pub fn evaluate(&self) -> Result<Evaluation> {
        let path = self.result_path("eval");
        if let Some(e) = load_json(&path)? {
            return Ok(e);
        }
        let base = self.base()?;
        let test = self.test_blocks();
        let hessians = self.reference_hessians(&base)?;
        let mut entries = Vec::new();
        for &format in &self.cfg.formats {
            for &method in &self.cfg.methods {
                let m = self.quantized(method, format)?;
                let test_nll = forward_nll(&m.params, None, &test)?;
                let layer_mse = hessians
                    .iter()
                    .map(|h| {
                        let mse =
                            layer_mse_from_hessian(m.params.linear_weight(h.layer), base.linear_weight(h.layer), h)?;
                        Ok(LayerMse {
                            layer: h.layer.to_string(),
                            mse,
                        })
                    })
                    .collect::<Result<_>>()?;
                log::info!("{method} {format}: test nll {test_nll:.4}");
                entries.push(MethodEval {
                    format,
                    method,
                    test_nll,
                    weight_bytes: weight_size_bytes(&self.cfg.model, Some(format)),
                    layer_mse,
                });
            }
        }
        let e = Evaluation {
            full_precision_test_nll: forward_nll(&base, None, &test)?,
            full_precision_bytes: weight_size_bytes(&self.cfg.model, None),
            entries,
        };
        save_json(&path, &e)?;
        Ok(e)
    }

    /// Radial sweeps, segments between solutions and the basin estimate.
    pub fn landscape(&self) -> Result<LandscapeResult> {
        let path = self.result_path("landscape");
        if let Some(r) = load_json(&path)? {
            return Ok(r);
        }
        let lc = &self.cfg.landscape;
        let base = self.base()?;
        let w = base.flatten_quantized();
        let data = ProbeData {
            train: take(self.dataset.train.blocks(), lc.eval_blocks),
            val: take(self.dataset.val.blocks(), lc.eval_blocks),
        };
        let finest = *self.cfg.formats.iter().max().expect("validated non-empty");
        let coarsest = *self.cfg.formats.iter().min().expect("validated non-empty");
        let d_fine = weight_distance(&self.rtn(finest)?.params.flatten_quantized(), &w)?;
        let d_coarse = weight_distance(&self.rtn(coarsest)?.params.flatten_quantized(), &w)?;
        let radii = log_radii(lc.radius_lo_factor * d_fine, lc.radius_hi_factor * d_coarse, lc.n_radii)?;

        let mut radial = Vec::with_capacity(lc.n_directions);
        for i in 0..lc.n_directions {
            let seed = self.cfg.seed.wrapping_mul(1000).wrapping_add(i as u64 + 1);
            let dir = sample_unit_direction(w.len(), seed)?;
            log::info!("radial profile {}/{}", i + 1, lc.n_directions);
            radial.push(radial_profile(&base, &dir, &radii, &data, BASE_ANCHOR)?);
        }

        let ts = unit_grid(lc.segment_samples);
        let mut segments = Vec::new();
        let mut distances = Vec::new();
        for &format in &self.cfg.formats {
            let mut solutions = Vec::new();
            for &method in &self.cfg.methods {
                let v = self.quantized(method, format)?.params.flatten_quantized();
                distances.push(AnchorDistance {
                    format,
                    method,
                    distance: weight_distance(&v, &w)?,
                });
                segments.push(segment_profile(
                    &base,
                    (BASE_ANCHOR, &w),
                    (&anchor_name(method, format), &v),
                    &ts,
                    &data,
                )?);
                solutions.push((method, v));
            }
            let find = |m: Method| solutions.iter().find(|(x, _)| *x == m).map(|(_, v)| v);
            if let (Some(g), Some(q)) = (find(Method::Gptq), find(Method::Qaft)) {
                segments.push(segment_profile(
                    &base,
                    (&anchor_name(Method::Gptq, format), g),
                    (&anchor_name(Method::Qaft, format), q),
                    &ts,
                    &data,
                )?);
            }
        }
        let (basin, basin_refusal) = match basin_radius(&radial, &lc.rule) {
            Ok(b) => (Some(b), None),
            Err(Error::BasinRefused(msg)) => {
                log::warn!("basin estimate refused: {msg}");
                (None, Some(msg))
            }
            Err(e) => return Err(e),
        };
        let r = LandscapeResult {
            radii,
            radial,
            segments,
            basin,
            basin_refusal,
            distances,
        };
        save_json(&path, &r)?;
        Ok(r)
    }

    /// Writes the requested CSV reports, computing any missing stage first.
    pub fn write_reports(&self, kind: ReportKind) -> Result<Vec<PathBuf>> {
        let all = kind == ReportKind::All;
        let mut written = Vec::new();
        let mut emit = |name: &str, f: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
            let p = self.report_path(name);
            f(&p)?;
            written.push(p);
            Ok(())
        };
        if all || kind == ReportKind::Misalignment || kind == ReportKind::Tradeoff {
            let e = self.evaluate()?;
            if all || kind == ReportKind::Misalignment {
                emit("misalignment.csv", &|p| {
                    write_csv(p, &self.hash, &report::MISALIGNMENT_HEADER, &misalignment_rows(&e))
                })?;
            }
            if all || kind == ReportKind::Tradeoff {
                emit("tradeoff.csv", &|p| {
                    write_csv(p, &self.hash, &report::TRADEOFF_HEADER, &self.tradeoff_rows(&e))
                })?;
            }
        }
        if all || kind == ReportKind::Landscape {
            let l = self.landscape()?;
            emit("landscape.csv", &|p| {
                write_csv(p, &self.hash, &report::LANDSCAPE_HEADER, &landscape_rows(&l))
            })?;
            emit("basin.csv", &|p| {
                write_csv(p, &self.hash, &report::BASIN_HEADER, &basin_rows(&l))
            })?;
        }
        if (all || kind == ReportKind::QaftTrace) && self.cfg.methods.contains(&Method::Qaft) {
            let mut trace = Vec::new();
            let mut lrs = Vec::new();
            for &format in &self.cfg.formats {
                let (_, rec) = self.qaft(format)?;
                for r in &rec.trace {
                    trace.push(vec![
                        format.to_string(),
                        num(r.lr),
                        r.epoch.to_string(),
                        num(r.train_nll),
                        num(r.val_nll),
                        num(r.test_nll),
                    ]);
                }
                for s in &rec.per_lr {
                    lrs.push(vec![
                        format.to_string(),
                        num(s.lr),
                        s.best_val_nll.map(num).unwrap_or_default(),
                        s.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
                        if s.best_val_nll.is_some() { "ok" } else { "failed" }.to_string(),
                    ]);
                }
            }
            emit("qaft_trace.csv", &|p| {
                write_csv(p, &self.hash, &report::QAFT_TRACE_HEADER, &trace)
            })?;
            emit("qaft_lr.csv", &|p| {
                write_csv(p, &self.hash, &report::QAFT_LR_HEADER, &lrs)
            })?;
        }
        if (all || kind == ReportKind::GptqDamp) && self.cfg.methods.contains(&Method::Gptq) {
            let mut rows = Vec::new();
            for &format in &self.cfg.formats {
                rows.extend(damp_rows(format, &self.gptq(format)?.1));
            }
            emit("gptq_damp.csv", &|p| {
                write_csv(p, &self.hash, &report::GPTQ_DAMP_HEADER, &rows)
            })?;
        }
        Ok(written)
    }

    fn tradeoff_rows(&self, e: &Evaluation) -> Vec<Vec<String>> {
        let c = &self.cfg.model;
        let model = format!("toy-L{}-d{}-ff{}", c.n_layers, c.d_model, c.d_ff);
        let mut rows = vec![vec![
            model.clone(),
            "fp32".into(),
            "none".into(),
            e.full_precision_bytes.to_string(),
            num(e.full_precision_test_nll),
        ]];
        for m in &e.entries {
            rows.push(vec![
                model.clone(),
                m.format.to_string(),
                m.method.to_string(),
                m.weight_bytes.to_string(),
                num(m.test_nll),
            ]);
        }
        rows
    }

    /// Every stage, then every report.
    pub fn run_all(&self) -> Result<Vec<PathBuf>> {
        self.prep_data()?;
        self.base()?;
        for &format in &self.cfg.formats {
            for &method in &self.cfg.methods {
                self.quantized(method, format)?;
            }
        }
        self.evaluate()?;
        self.landscape()?;
        self.write_reports(ReportKind::All)
    }
}

fn take(blocks: Vec<&[u16]>, cap: Option<usize>) -> Vec<&[u16]> {
    match cap {
        Some(n) => blocks.into_iter().take(n).collect(),
        None => blocks,
    }
}

fn damp_rows(format: QuantFormat, report: &[DampReportRow]) -> Vec<Vec<String>> {
    report
        .iter()
        .map(|r| {
            vec![
                format.to_string(),
                r.layer.to_string(),
                r.chosen_factor.map(num).unwrap_or_else(|| "rtn".into()),
                num(r.mse_rtn),
                num(r.mse_gptq),
            ]
        })
        .collect()
}

fn misalignment_rows(e: &Evaluation) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for m in &e.entries {
        let (f, meth) = (m.format.to_string(), m.method.to_string());
        rows.push(vec![
            f.clone(),
            meth.clone(),
            "global".into(),
            num(m.test_nll),
            String::new(),
        ]);
        for l in &m.layer_mse {
            rows.push(vec![
                f.clone(),
                meth.clone(),
                l.layer.clone(),
                String::new(),
                num(l.mse),
            ]);
        }
    }
    rows
}

fn landscape_rows(l: &LandscapeResult) -> Vec<Vec<String>> {
    l.radial
        .iter()
        .chain(&l.segments)
        .flat_map(|p| {
            p.samples.iter().map(move |s| {
                vec![
                    p.kind.to_string(),
                    p.anchor_a.clone(),
                    p.anchor_b.clone(),
                    p.seed.map(|s| s.to_string()).unwrap_or_default(),
                    num(s.x),
                    num(s.distance),
                    num(s.train_nll),
                    num(s.val_nll),
                ]
            })
        })
        .collect()
}

fn basin_rows(l: &LandscapeResult) -> Vec<Vec<String>> {
    l.distances
        .iter()
        .map(|d| match &l.basin {
            Some(b) => vec![
                d.format.to_string(),
                d.method.to_string(),
                num(d.distance),
                num(b.radius),
                num(b.base_loss),
                num(b.plateau_loss),
                (d.distance < b.radius).to_string(),
            ],
            None => vec![
                d.format.to_string(),
                d.method.to_string(),
                num(d.distance),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ],
        })
        .collect()
}
