//! Config-driven experiment runs and hyperparameter sweeps.
//!
//! A run reads one TOML document, creates its run directory exclusively,
//! copies the config in verbatim, then trains, checkpoints and sweeps noise
//! levels. Every artifact lands in the run directory.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::{gen_synthetic_corpus, CorpusSpec, ParallelCorpus};
use crate::embedder::EmbedderConfig;
use crate::error::{Error, Result};
use crate::eval::{corpus_bleu, curves_svg, default_ps, degradation_sweep, DegradationCurve};
use crate::model::{FrontendConfig, Model, ModelConfig};
use crate::noise::{parse_marks, CharTable, NoiseKind, NoiseSpec};
use crate::render::RenderConfig;
use crate::slicer::SliceConfig;
use crate::tensor::Params;
use crate::train::{train, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub train_source: Option<PathBuf>,
    pub train_target: Option<PathBuf>,
    pub dev_source: Option<PathBuf>,
    pub dev_target: Option<PathBuf>,
    pub test_source: Option<PathBuf>,
    pub test_target: Option<PathBuf>,
    /// Generate the data instead of reading files. The last `test_size`
    /// pairs become the test set and the `dev_size` before them the dev set.
    pub synthetic: Option<CorpusSpec>,
    pub dev_size: usize,
    pub test_size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train_source: None,
            train_target: None,
            dev_source: None,
            dev_target: None,
            test_source: None,
            test_target: None,
            synthetic: None,
            dev_size: 200,
            test_size: 200,
        }
    }
}

/// The three splits of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: ParallelCorpus,
    pub dev: ParallelCorpus,
    pub test: ParallelCorpus,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn pair(base: &Path, s: &Option<PathBuf>, t: &Option<PathBuf>, what: &str) -> Result<Option<ParallelCorpus>> {
    match (s, t) {
        (Some(s), Some(t)) => Ok(Some(ParallelCorpus::load(resolve(base, s), resolve(base, t))?)),
        (None, None) => Ok(None),
        _ => Err(Error::invalid(format!("{what} needs both source and target paths"))),
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.synthetic, &self.train_source) {
            (Some(spec), None) => {
                spec.validate()?;
                if spec.size <= self.dev_size + self.test_size {
                    return Err(Error::invalid("synthetic corpus leaves no training pairs"));
                }
                Ok(())
            }
            (None, Some(_)) => Ok(()),
            (Some(_), Some(_)) => Err(Error::invalid("give either corpus files or a synthetic spec, not both")),
            (None, None) => Err(Error::invalid("no corpus configured")),
        }
    }

    /// Relative paths resolve against `base`. A missing test set falls back
    /// to the dev set.
    pub fn load(&self, base: &Path) -> Result<Splits> {
        self.validate()?;
        if let Some(spec) = &self.synthetic {
            let all = gen_synthetic_corpus(spec)?.corpus;
            let (rest, test) = all.split_tail(self.test_size);
            let (train, dev) = rest.split_tail(self.dev_size);
            return Ok(Splits { train, dev, test });
        }
        let train = pair(base, &self.train_source, &self.train_target, "train")?
            .ok_or_else(|| Error::invalid("train corpus missing"))?;
        let dev = pair(base, &self.dev_source, &self.dev_target, "dev")?.unwrap_or_default();
        let test = pair(base, &self.test_source, &self.test_target, "test")?.unwrap_or_else(|| dev.clone());
        if train.is_empty() {
            return Err(Error::invalid("training corpus is empty"));
        }
        Ok(Splits { train, dev, test })
    }
}

/// A noise setting in a run config. `table` is a built-in table name or a
/// TSV path; `marks` lists combining marks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marks: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub char_p: Option<f64>,
}

impl NoiseConfig {
    pub fn to_spec(&self, base: &Path) -> Result<NoiseSpec> {
        let mut spec = NoiseSpec::new(self.kind, 0.0, 0);
        if let Some(t) = &self.table {
            let table = match CharTable::builtin(t) {
                Ok(tb) => tb,
                Err(_) => CharTable::load(resolve(base, Path::new(t)))?,
            };
            spec = spec.with_table(table);
        } else if self.kind == NoiseKind::MapChars {
            spec = spec.with_table(CharTable::cyrillic_to_latin().inverted());
        }
        if let Some(m) = &self.marks {
            spec = spec.with_marks(parse_marks(m)?);
        }
        if let Some(c) = self.char_p {
            spec = spec.with_char_p(c);
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ps: Vec<f64>,
    /// Noise seeds averaged per point.
    pub seeds: Vec<u64>,
    /// Test sentences decoded per point.
    pub test_limit: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ps: default_ps(),
            seeds: vec![1, 2, 3],
            test_limit: 200,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ps.is_empty() || self.seeds.is_empty() {
            return Err(Error::invalid("eval needs at least one p and one seed"));
        }
        if self.ps[0] != 0.0 || self.ps.windows(2).any(|w| w[0] >= w[1]) || self.ps.iter().any(|p| *p > 1.0) {
            return Err(Error::invalid(
                "eval ps must start at 0 and increase strictly up to at most 1",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_dir: PathBuf,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub noise: Vec<NoiseConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::parse(e.to_string()))
    }

    /// Checks every nested config. Nothing touches the disk.
    pub fn validate(&self, base: &Path) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        for n in &self.noise {
            n.to_spec(base)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub frontend: String,
    pub param_count: usize,
    pub steps: usize,
    pub final_dev_bleu: Option<f64>,
    pub test_bleu: f64,
    pub curves: Vec<DegradationCurve>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Creates `dir` and fails if it already exists.
fn create_exclusive(dir: &Path) -> Result<()> {
    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::create_dir(dir).map_err(|e| Error::io(dir, e))
}

/// Runs a config given as text. `base` resolves relative paths (normally
/// the config file's directory); `run_dir` overrides the configured one.
pub fn run_text(text: &str, base: &Path, run_dir: Option<&Path>) -> Result<RunSummary> {
    let mut cfg = RunConfig::parse(text).map_err(|e| e.in_stage("config"))?;
    if let Some(d) = run_dir {
        cfg.run_dir = d.to_path_buf();
    }
    run(&cfg, text, base)
}

/// Executes train, checkpoint and noise sweeps. `text` is copied verbatim
/// into the run directory as `config.toml`.
pub fn run(cfg: &RunConfig, text: &str, base: &Path) -> Result<RunSummary> {
    cfg.validate(base).map_err(|e| e.in_stage("config"))?;
    let dir = resolve(base, &cfg.run_dir);
    create_exclusive(&dir).map_err(|e| e.in_stage("setup"))?;
    write_file(&dir.join("config.toml"), text.as_bytes()).map_err(|e| e.in_stage("setup"))?;

    let splits = (|| {
        let splits = cfg.corpus.load(base)?;
        let data = dir.join("data");
        fs::create_dir(&data).map_err(|e| Error::io(&data, e))?;
        splits.train.save(data.join("train.src"), data.join("train.tgt"))?;
        splits.dev.save(data.join("dev.src"), data.join("dev.tgt"))?;
        splits.test.save(data.join("test.src"), data.join("test.tgt"))?;
        Ok(splits)
    })()
    .map_err(|e: Error| e.in_stage("corpus"))?;

    let (records, trained) = (|| {
        let mut model = Model::new(cfg.model.clone(), &splits.train.source, &splits.train.target)?;
        let metrics_path = dir.join("metrics.jsonl");
        let mut log = OpenOptions::new()
            .create_new(true)
            .write(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?;
        let dev = (!splits.dev.is_empty()).then_some(&splits.dev);
        let records = train(&mut model, &splits.train, dev, &cfg.train, &mut |r| {
            let line = serde_json::to_string(r).map_err(|e| Error::parse(e.to_string()))?;
            writeln!(log, "{line}").map_err(|e| Error::io(&metrics_path, e))
        })?;
        Ok((records, model))
    })()
    .map_err(|e: Error| e.in_stage("train"))?;

    // evaluate exactly what was persisted
    let model = (|| {
        let ck = dir.join("checkpoint");
        checkpoint::save(&trained, &ck)?;
        checkpoint::load(&ck)
    })()
    .map_err(|e: Error| e.in_stage("checkpoint"))?;

    let (test_bleu, curves) = (|| {
        let test = splits.test.head(cfg.eval.test_limit);
        if test.is_empty() {
            return Err(Error::invalid("no test or dev data to evaluate"));
        }
        let mut translate = |x: &[String]| model.translate_all(x);
        let test_bleu = corpus_bleu(&translate(&test.source)?, &test.target)?.bleu;
        let id = cfg.model.frontend.name();
        let curves_dir = dir.join("curves");
        fs::create_dir(&curves_dir).map_err(|e| Error::io(&curves_dir, e))?;
        let mut curves = Vec::new();
        for (i, n) in cfg.noise.iter().enumerate() {
            let spec = n.to_spec(base)?;
            let curve = degradation_sweep(
                &mut translate,
                &test.source,
                &test.target,
                &spec,
                &cfg.eval.ps,
                &cfg.eval.seeds,
                id,
            )?;
            let stem = format!("{i}-{}", n.kind.name());
            write_file(&curves_dir.join(format!("{stem}.csv")), curve.to_csv().as_bytes())?;
            let title = format!("{id} under {} noise", n.kind.name());
            write_file(
                &curves_dir.join(format!("{stem}.svg")),
                curves_svg(&title, &[&curve]).as_bytes(),
            )?;
            curves.push(curve);
        }
        Ok((test_bleu, curves))
    })()
    .map_err(|e: Error| e.in_stage("eval"))?;

    let summary = RunSummary {
        run_dir: dir.clone(),
        frontend: cfg.model.frontend.name().to_string(),
        param_count: model.params.param_count(),
        steps: records.last().map(|r| r.step).unwrap_or(0),
        final_dev_bleu: records.last().and_then(|r| r.dev_bleu),
        test_bleu,
        curves,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::parse(e.to_string()))?;
    write_file(&dir.join("summary.json"), json.as_bytes()).map_err(|e| e.in_stage("eval"))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub name: String,
    pub values: Vec<f64>,
}

/// Cross product of named axes, filtered by window >= stride.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(rename = "axis")]
    pub axes: Vec<Axis>,
}

pub const SWEEP_AXES: &[&str] = &[
    "window",
    "stride",
    "font_size",
    "conv_blocks",
    "d_model",
    "layers",
    "lr",
    "batch_size",
    "label_smoothing",
    "seed",
];

fn as_count(name: &str, v: f64) -> Result<usize> {
    if v < 0.0 || v.fract() != 0.0 {
        return Err(Error::invalid(format!(
            "{name} must be a non-negative integer, got {v}"
        )));
    }
    Ok(v as usize)
}

type VisualParts<'a> = (&'a mut RenderConfig, &'a mut SliceConfig, &'a mut EmbedderConfig);

fn visual<'a>(cfg: &'a mut RunConfig, name: &str) -> Result<VisualParts<'a>> {
    match &mut cfg.model.frontend {
        FrontendConfig::Visual {
            render,
            slice,
            embedder,
        } => Ok((render, slice, embedder)),
        FrontendConfig::Bpe { .. } => Err(Error::invalid(format!("axis {name} needs the visual front-end"))),
    }
}

/// Sets one sweep axis on a config.
pub fn apply_axis(cfg: &mut RunConfig, name: &str, v: f64) -> Result<()> {
    match name {
        "window" => visual(cfg, name)?.1.window = as_count(name, v)?,
        "stride" => visual(cfg, name)?.1.stride = as_count(name, v)?,
        "font_size" => visual(cfg, name)?.0.font_size = as_count(name, v)? as u32,
        "conv_blocks" => visual(cfg, name)?.2.conv_blocks = as_count(name, v)?,
        "d_model" => cfg.model.d_model = as_count(name, v)?,
        "layers" => cfg.model.layers = as_count(name, v)?,
        "lr" => cfg.train.lr = v,
        "batch_size" => cfg.train.batch_size = as_count(name, v)?,
        "label_smoothing" => cfg.model.label_smoothing = v,
        "seed" => {
            cfg.model.seed = as_count(name, v)? as u64;
            cfg.train.seed = cfg.model.seed;
        }
        _ => {
            return Err(Error::invalid(format!(
                "unknown sweep axis {name}; expected one of {}",
                SWEEP_AXES.join(", ")
            )))
        }
    }
    Ok(())
}

fn fmt_value(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

impl SweepGrid {
    pub fn parse(text: &str) -> Result<Self> {
        let grid: Self = toml::from_str(text).map_err(|e| Error::parse(e.to_string()))?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() || self.axes.iter().any(|a| a.values.is_empty()) {
            return Err(Error::invalid("sweep needs at least one axis, each with values"));
        }
        for (i, a) in self.axes.iter().enumerate() {
            if !SWEEP_AXES.contains(&a.name.as_str()) {
                return Err(Error::invalid(format!("unknown sweep axis {}", a.name)));
            }
            if self.axes[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::invalid(format!("duplicate axis {}", a.name)));
            }
        }
        Ok(())
    }

    /// Surviving grid points in row-major order, each as `(axis, value)`.
    /// Points whose window is narrower than their stride (taking unswept
    /// values from `base`) are dropped.
    pub fn points(&self, base: &RunConfig) -> Result<Vec<Vec<(String, f64)>>> {
        self.validate()?;
        let mut out: Vec<Vec<(String, f64)>> = vec![Vec::new()];
        for axis in &self.axes {
            out = out
                .into_iter()
                .flat_map(|p| {
                    axis.values.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.push((axis.name.clone(), v));
                        q
                    })
                })
                .collect();
        }
        let mut kept = Vec::new();
        for p in out {
            let mut cfg = base.clone();
            for (name, v) in &p {
                apply_axis(&mut cfg, name, *v)?;
            }
            if let FrontendConfig::Visual { slice, .. } = &cfg.model.frontend {
                if slice.window < slice.stride {
                    continue;
                }
            }
            kept.push(p);
        }
        if kept.is_empty() {
            return Err(Error::invalid("no grid point satisfies window >= stride"));
        }
        Ok(kept)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub point: Vec<(String, f64)>,
    /// Final dev BLEU (test BLEU when there is no dev set); `None` when the
    /// run failed.
    pub bleu: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub axes: Vec<String>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// One row per grid point; failed runs leave the bleu cell empty.
    pub fn to_csv(&self) -> String {
        let mut out = self.axes.join(",");
        out.push_str(",bleu\n");
        for r in &self.rows {
            for (_, v) in &r.point {
                let _ = write!(out, "{},", fmt_value(*v));
            }
            if let Some(b) = r.bleu {
                let _ = write!(out, "{b:.2}");
            }
            out.push('\n');
        }
        out
    }

    /// For two-axis sweeps: first axis down, second across.
    pub fn to_grid_csv(&self) -> Option<String> {
        if self.axes.len() != 2 {
            return None;
        }
        let mut cols: Vec<f64> = Vec::new();
        let mut rows: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !rows.contains(&r.point[0].1) {
                rows.push(r.point[0].1);
            }
            if !cols.contains(&r.point[1].1) {
                cols.push(r.point[1].1);
            }
        }
        let mut out = format!("{}\\{}", self.axes[0], self.axes[1]);
        for c in &cols {
            let _ = write!(out, ",{}", fmt_value(*c));
        }
        out.push('\n');
        for rv in &rows {
            out.push_str(&fmt_value(*rv));
            for cv in &cols {
                out.push(',');
                let cell = self.rows.iter().find(|r| r.point[0].1 == *rv && r.point[1].1 == *cv);
                if let Some(b) = cell.and_then(|r| r.bleu) {
                    let _ = write!(out, "{b:.2}");
                }
            }
            out.push('\n');
        }
        Some(out)
    }
}

/// One run per surviving grid point under `out_dir`. Failed runs become
/// empty cells; the sweep carries on.
pub fn sweep(grid: &SweepGrid, base: &RunConfig, base_dir: &Path, out_dir: &Path) -> Result<SweepTable> {
    let points = grid.points(base)?;
    create_exclusive(out_dir)?;
    let mut rows = Vec::with_capacity(points.len());
    for point in points {
        let name = point
            .iter()
            .map(|(n, v)| format!("{n}={}", fmt_value(*v)))
            .collect::<Vec<_>>()
            .join(",");
        let outcome: Result<f64> = (|| {
            let mut cfg = base.clone();
            for (n, v) in &point {
                apply_axis(&mut cfg, n, *v)?;
            }
            cfg.run_dir = out_dir.join(&name);
            let text = cfg.to_toml()?;
            let s = run(&cfg, &text, base_dir)?;
            Ok(s.final_dev_bleu.unwrap_or(s.test_bleu))
        })();
        rows.push(match outcome {
            Ok(b) => SweepRow {
                point,
                bleu: Some(b),
                error: None,
            },
            Err(e) => SweepRow {
                point,
                bleu: None,
                error: Some(e.to_string()),
            },
        });
    }
    let table = SweepTable {
        axes: grid.axes.iter().map(|a| a.name.clone()).collect(),
        rows,
    };
    write_file(&out_dir.join("results.csv"), table.to_csv().as_bytes())?;
    if let Some(g) = table.to_grid_csv() {
        write_file(&out_dir.join("grid.csv"), g.as_bytes())?;
    }
    let mut failures = String::new();
    for r in table.rows.iter().filter(|r| r.error.is_some()) {
        let _ = writeln!(failures, "{:?}: {}", r.point, r.error.as_deref().unwrap_or(""));
    }
    if !failures.is_empty() {
        write_file(&out_dir.join("failures.txt"), failures.as_bytes())?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_text(run_dir: &str) -> String {
        format!(
            r#"
run_dir = "{run_dir}"

[corpus]
dev_size = 4
test_size = 4

[corpus.synthetic]
task = "copy"
size = 30
alphabet = "abcde"
max_tokens = 3

[model]
layers = 1
heads = 2
d_model = 8
d_ff = 8
target_merges = 4

[model.frontend]
kind = "visual"

[model.frontend.slice]
window = 20
stride = 10

[train]
batch_size = 8
max_steps = 3
eval_every = 2

[[noise]]
kind = "swap"

[eval]
ps = [0.0, 0.5, 1.0]
seeds = [1, 2]
"#
        )
    }

    #[test]
    fn config_round_trip() {
        let cfg = RunConfig::parse(&tiny_text("r")).unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
        assert!(RunConfig::parse("run_dir = \"x\"\nbogus = 1\n").is_err());
    }

    #[test]
    fn run_produces_artifacts_and_rejects_bad_configs() {
        let tmp = tempfile::tempdir().unwrap();
        let text = tiny_text("run");
        let s = run_text(&text, tmp.path(), None).unwrap();
        for f in [
            "config.toml",
            "metrics.jsonl",
            "checkpoint/manifest.txt",
            "curves/0-swap.csv",
            "summary.json",
        ] {
            assert!(s.run_dir.join(f).exists(), "{f}");
        }
        assert_eq!(fs::read_to_string(s.run_dir.join("config.toml")).unwrap(), text);
        assert_eq!(
            fs::read_to_string(s.run_dir.join("metrics.jsonl"))
                .unwrap()
                .lines()
                .count(),
            2
        );
        // the directory is taken now
        assert!(run_text(&text, tmp.path(), None).is_err());

        let bad = text.replace("window = 20", "window = 5");
        let err = run_text(&bad, tmp.path(), Some(Path::new("bad"))).unwrap_err();
        assert!(err.to_string().starts_with("[config]"), "{err}");
        assert!(!tmp.path().join("bad").exists());
    }

    #[test]
    fn grid_constraint() {
        let base = RunConfig::parse(&tiny_text("r")).unwrap();
        let grid = SweepGrid::parse(
            "[[axis]]\nname = \"window\"\nvalues = [20, 25]\n[[axis]]\nname = \"stride\"\nvalues = [10, 15, 25]\n",
        )
        .unwrap();
        let pts = grid.points(&base).unwrap();
        assert_eq!(pts.len(), 5);
        assert!(pts.iter().all(|p| p[0].1 >= p[1].1));
        let one = SweepGrid {
            axes: vec![Axis {
                name: "lr".into(),
                values: vec![1e-3],
            }],
        };
        assert_eq!(one.points(&base).unwrap().len(), 1);
        let none = SweepGrid {
            axes: vec![Axis {
                name: "window".into(),
                values: vec![5.0],
            }],
        };
        assert!(none.points(&base).is_err());
        assert!(SweepGrid::parse("[[axis]]\nname = \"colour\"\nvalues = [1]\n").is_err());
    }

    #[test]
    fn sweep_records_failures_as_missing_cells() {
        let tmp = tempfile::tempdir().unwrap();
        let mut base = RunConfig::parse(&tiny_text("unused")).unwrap();
        base.train.max_steps = 1;
        base.noise.clear();
        // d_model 7 is not divisible by the 2 heads, so that run fails
        let grid = SweepGrid {
            axes: vec![
                Axis {
                    name: "d_model".into(),
                    values: vec![8.0, 7.0],
                },
                Axis {
                    name: "stride".into(),
                    values: vec![10.0],
                },
            ],
        };
        let table = sweep(&grid, &base, tmp.path(), &tmp.path().join("sweep")).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert!(table.rows[0].bleu.is_some());
        assert!(table.rows[1].bleu.is_none());
        let csv = table.to_csv();
        assert!(csv.starts_with("d_model,stride,bleu\n8,10,"));
        assert!(csv.ends_with("7,10,\n"));
        assert!(tmp.path().join("sweep/grid.csv").exists());
        assert!(tmp.path().join("sweep/failures.txt").exists());
    }
}
