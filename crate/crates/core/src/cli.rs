//! Command implementations behind the `ugmm-nn` binary.
//!
//! Exit codes: 0 success, 1 configuration or argument error, 2 data or
//! checkpoint error, 3 numerical failure (including a failed gradient audit).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audit::{run_gradcheck, GradcheckReport};
use crate::data::{load_checkpoint, save_checkpoint, Checkpoint, DataSource, DatasetName};
use crate::error::{Error, Result};
use crate::net::{DropoutPlacement, Layer, Mode, ModelKind, NetworkSpec};
use crate::numkit::Rng;
use crate::train::{evaluate, train_run_with, OptimConfig, ScheduleConfig, TrainConfig, TrainOutcome};
use crate::ugmm;

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Index(_) => 1,
            Error::Io { .. } | Error::Data(_) | Error::Checkpoint(_) | Error::Shape(_) => 2,
            Error::Numerical(_) | Error::EmptyMixture => 3,
        }
    }
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

fn default_gamma() -> f64 {
    0.1
}

/// One experiment, as read from a JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub mode: Mode,
    pub layer_widths: Vec<usize>,
    #[serde(default)]
    pub dropout: Vec<DropoutPlacement>,
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Global-norm clip. Absent means the model default (10 for uGMM, off
    /// for the FFNN); `0` switches it off.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset: DataSource,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            // serde reports the offending key in its message; surface it as the field.
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.starts_with("unknown field") || msg.starts_with("missing field"))
                .unwrap_or("config")
                .to_string();
            Error::Config { field, reason: msg }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec {
            kind: self.model,
            layer_widths: self.layer_widths.clone(),
            dropout: self.dropout.clone(),
            mode: self.mode,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let grad_clip = match self.grad_clip {
            Some(c) if c == 0.0 => None,
            Some(c) => Some(c),
            None => TrainConfig::defaults_for(self.model).grad_clip,
        };
        TrainConfig {
            optim: OptimConfig { lr0: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps },
            schedule: ScheduleConfig { milestones: self.milestones.clone(), gamma: self.gamma },
            epochs: self.epochs,
            batch_size: self.batch_size,
            grad_clip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network_spec().validate()?;
        self.train_config().validate()?;
        if let Some(c) = self.grad_clip {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::config("grad_clip", format!("must be non-negative, got {c}")));
            }
        }
        let f = self.dataset.test_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::config("dataset.test_fraction", format!("must lie in (0, 1), got {f}")));
        }
        if self.dataset.train_limit == Some(0) {
            return Err(Error::config("dataset.train_limit", "must be positive"));
        }
        Ok(())
    }

    fn loss_name(&self) -> &'static str {
        match self.mode {
            Mode::Discriminative => "Cross-Entropy",
            Mode::Generative => "NLL (Generative)",
        }
    }
}

fn base_dir(config_path: &Path) -> PathBuf {
    config_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn absolute(base: &Path, p: &Path) -> PathBuf {
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    std::path::absolute(&joined).unwrap_or(joined)
}

/// What a finished `train` produced.
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub config: RunConfig,
    pub outcome: TrainOutcome,
    pub output_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub report: PathBuf,
    pub final_accuracy: f64,
}

/// Trains the configured model and writes `model.ckpt`, `report.csv` and
/// `summary.txt` into the output directory (`out_override` wins over the
/// config's `output_dir`). Relative paths in the config resolve against the
/// config file's directory.
pub fn cmd_train(config_path: &Path, out_override: Option<&Path>, verbose: bool) -> Result<TrainArtifacts> {
    let config = RunConfig::load(config_path)?;
    let base = base_dir(config_path);
    train_from_config(config, &base, out_override, verbose)
}

pub fn train_from_config(
    mut config: RunConfig,
    base: &Path,
    out_override: Option<&Path>,
    verbose: bool,
) -> Result<TrainArtifacts> {
    config.validate()?;
    config.dataset.path = absolute(base, &config.dataset.path);
    let output_dir = match out_override {
        Some(o) => o.to_path_buf(),
        None => absolute(base, &config.output_dir),
    };
    let (train, test) = config.dataset.load(base, config.seed)?;

    let spec = config.network_spec();
    let cfg = config.train_config();
    let mut rng = Rng::new(config.seed);
    let outcome = train_run_with(&spec, &train, &test, &cfg, &mut rng, |r| {
        if verbose {
            eprintln!(
                "epoch {:>3}  lr {:.0e}  loss {:.6}  test_accuracy {:.4}",
                r.epoch, r.lr, r.train_loss, r.test_accuracy
            );
        }
    })?;

    std::fs::create_dir_all(&output_dir).map_err(|e| Error::io(&output_dir, e))?;
    let checkpoint = output_dir.join("model.ckpt");
    let report = output_dir.join("report.csv");
    save_checkpoint(
        &checkpoint,
        &Checkpoint {
            spec,
            source: Some(config.dataset.clone()),
            params: outcome.params.clone(),
            adam: outcome.adam.clone(),
            epoch: cfg.epochs as u64,
        },
    )?;
    std::fs::write(&report, outcome.report.to_csv()).map_err(|e| Error::io(&report, e))?;
    let final_accuracy = outcome.report.final_accuracy().unwrap_or_else(|| {
        evaluate(&outcome.params, &test.x, &test.y).unwrap_or(0.0)
    });
    let summary = output_dir.join("summary.txt");
    std::fs::write(&summary, format!("test_accuracy={final_accuracy}\n")).map_err(|e| Error::io(&summary, e))?;
    Ok(TrainArtifacts { config, outcome, output_dir, checkpoint, report, final_accuracy })
}

fn default_data_path(name: DatasetName) -> PathBuf {
    match name {
        DatasetName::Iris => PathBuf::from("data/iris.csv"),
        DatasetName::Mnist => PathBuf::from("data/mnist"),
    }
}

/// Test accuracy of a checkpoint. When `data` names the dataset the
/// checkpoint was trained on, its recorded source (path and split) is reused
/// unless `path` overrides the location.
pub fn cmd_eval(ckpt_path: &Path, data: DatasetName, path: Option<&Path>) -> Result<f64> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let mut source = match &ckpt.source {
        Some(s) if s.name == data => s.clone(),
        _ => DataSource {
            name: data,
            path: default_data_path(data),
            test_fraction: 0.2,
            split_seed: None,
            train_limit: None,
        },
    };
    if let Some(p) = path {
        source.path = p.to_path_buf();
    }
    let (_, test) = source.load(Path::new(""), ckpt.spec.seed)?;
    if test.features() != ckpt.params.input_width() {
        return Err(Error::Data(format!(
            "checkpoint expects {} features, {} has {}",
            ckpt.params.input_width(),
            data,
            test.features()
        )));
    }
    if test.class_count > ckpt.params.output_width() {
        return Err(Error::Data(format!(
            "checkpoint has {} outputs, {} has {} classes",
            ckpt.params.output_width(),
            data,
            test.class_count
        )));
    }
    evaluate(&ckpt.params, &test.x, &test.y)
}

pub fn cmd_gradcheck(seed: u64, sizes: (usize, usize, usize), instances: usize) -> Result<GradcheckReport> {
    if sizes.0 == 0 || sizes.1 == 0 || sizes.2 == 0 {
        return Err(Error::config("sizes", "batch, inputs and neurons must all be positive"));
    }
    run_gradcheck(seed, sizes, instances, &ugmm::backward)
}

/// Files written by `inspect`.
#[derive(Debug, Clone)]
pub struct InspectOutput {
    pub csv: PathBuf,
    pub svg: PathBuf,
}

#[derive(Debug, Clone, Copy)]
pub struct InspectArgs {
    pub layer: usize,
    pub neuron: usize,
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

/// Density table for one neuron: `y`, each weighted component
/// `π_k N(y; μ_k, σ_k²)`, and their sum.
pub fn density_table(ckpt: &Checkpoint, args: InspectArgs) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if !(args.min.is_finite() && args.max.is_finite() && args.min < args.max) {
        return Err(Error::config("min/max", format!("need min < max, got {} and {}", args.min, args.max)));
    }
    if args.points < 2 {
        return Err(Error::config("points", "need at least 2 grid points"));
    }
    let layers = ckpt.params.layers();
    let layer = layers.get(args.layer).ok_or_else(|| {
        Error::Index(format!("layer {} of a network with {} layers", args.layer, layers.len()))
    })?;
    let Layer::Ugmm(p) = layer else {
        return Err(Error::Index(format!("layer {} is not a uGMM layer", args.layer)));
    };
    let step = (args.max - args.min) / (args.points - 1) as f64;
    let grid: Vec<f64> = (0..args.points).map(|i| args.min + step * i as f64).collect();
    let comps = ugmm::component_curves(p, args.neuron, &grid)?;
    Ok((grid, comps))
}

pub fn cmd_inspect(ckpt_path: &Path, args: InspectArgs, out_dir: Option<&Path>) -> Result<InspectOutput> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let (grid, comps) = density_table(&ckpt, args)?;
    let n = comps.first().map_or(0, Vec::len);

    let mut csv = String::from("y");
    for k in 0..n {
        let _ = write!(csv, ",component_{k}");
    }
    csv.push_str(",total\n");
    for (y, row) in grid.iter().zip(&comps) {
        let _ = write!(csv, "{y}");
        for v in row {
            let _ = write!(csv, ",{v}");
        }
        let _ = writeln!(csv, ",{}", row.iter().sum::<f64>());
    }

    let dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ckpt_path.parent().map(Path::to_path_buf).unwrap_or_default());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let stem = format!("density_layer{}_neuron{}", args.layer, args.neuron);
    let csv_path = dir.join(format!("{stem}.csv"));
    let svg_path = dir.join(format!("{stem}.svg"));
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    let title = format!("layer {} neuron {}", args.layer, args.neuron);
    std::fs::write(&svg_path, density_svg(&grid, &comps, &title)).map_err(|e| Error::io(&svg_path, e))?;
    Ok(InspectOutput { csv: csv_path, svg: svg_path })
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Line plot of every weighted component plus the dashed mixture total.
pub fn density_svg(grid: &[f64], comps: &[Vec<f64>], title: &str) -> String {
    let (w, h, pad) = (800.0, 480.0, 50.0);
    let totals: Vec<f64> = comps.iter().map(|r| r.iter().sum()).collect();
    let y_max = totals.iter().copied().fold(0.0f64, f64::max).max(1e-300);
    let (x0, x1) = (grid[0], grid[grid.len() - 1]);
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - y / y_max * (h - 2.0 * pad);
    let polyline = |values: &mut dyn Iterator<Item = f64>| -> String {
        grid.iter()
            .zip(values)
            .map(|(&x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect::<Vec<_>>()
            .join(" ")
    };

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{pad}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{b}" stroke="black"/>"#,
        b = h - pad,
        r = w - pad
    );
    let _ = writeln!(svg, r#"<text x="{}" y="30" font-family="sans-serif" font-size="16" text-anchor="middle">{title}</text>"#, w / 2.0);
    let _ = writeln!(svg, r#"<text x="{pad}" y="{}" font-family="sans-serif" font-size="12">{x0:.3}</text>"#, h - pad + 18.0);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="end">{x1:.3}</text>"#, w - pad, h - pad + 18.0);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="end">{y_max:.3e}</text>"#, pad - 4.0, pad + 4.0);
    let n = comps.first().map_or(0, Vec::len);
    for k in 0..n {
        let pts = polyline(&mut comps.iter().map(|r| r[k]));
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{pts}"/>"#,
            PALETTE[k % PALETTE.len()]
        );
    }
    let pts = polyline(&mut totals.iter().copied());
    let _ = writeln!(svg, r#"<polyline fill="none" stroke="black" stroke-width="2" stroke-dasharray="6,4" points="{pts}"/>"#);
    svg.push_str("</svg>\n");
    svg
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub dataset: DatasetName,
    pub model: ModelKind,
    pub accuracy: f64,
    pub loss: &'static str,
}

pub fn format_compare_table(rows: &[CompareRow]) -> String {
    let mut cells = vec![[
        "Dataset".to_string(),
        "Model".to_string(),
        "Test Accuracy (%)".to_string(),
        "Training Loss".to_string(),
    ]];
    for r in rows {
        cells.push([
            r.dataset.to_string(),
            r.model.to_string(),
            format!("{:.2}", 100.0 * r.accuracy),
            r.loss.to_string(),
        ]);
    }
    let widths: Vec<usize> = (0..4).map(|c| cells.iter().map(|row| row[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row.iter().zip(&widths).map(|(cell, w)| format!("{cell:<w$}")).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

pub fn cmd_compare(config_a: &Path, config_b: &Path, verbose: bool) -> Result<String> {
    let a = RunConfig::load(config_a)?;
    let b = RunConfig::load(config_b)?;
    if a.dataset.name != b.dataset.name {
        return Err(Error::config(
            "dataset.name",
            format!("configs train on different datasets ({} vs {})", a.dataset.name, b.dataset.name),
        ));
    }
    let mut rows = Vec::new();
    for (cfg, path) in [(a, config_a), (b, config_b)] {
        let loss = cfg.loss_name();
        let dataset = cfg.dataset.name;
        let model = cfg.model;
        let run = train_from_config(cfg, &base_dir(path), None, verbose)?;
        rows.push(CompareRow { dataset, model, accuracy: run.final_accuracy, loss });
    }
    Ok(format_compare_table(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    const IRIS_CFG: &str = r#"{
        "model": "ugmm", "mode": "generative", "layer_widths": [4, 16, 8, 3],
        "lr": 0.01, "milestones": [20, 45, 60], "gamma": 0.1,
        "epochs": 2, "batch_size": 16, "seed": 1,
        "dataset": {"name": "iris", "path": "iris.csv"},
        "output_dir": "out"
    }"#;

    #[test]
    fn parses_minimal_config() {
        let cfg = RunConfig::from_json(IRIS_CFG).unwrap();
        assert_eq!(cfg.beta2, 0.999);
        assert_eq!(cfg.dataset.test_fraction, 0.2);
        assert_eq!(cfg.train_config().grad_clip, Some(10.0));
    }

    fn field_of(err: Error) -> String {
        match err {
            Error::Config { field, .. } => field,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_fields_by_name() {
        let neg = IRIS_CFG.replace("\"lr\": 0.01", "\"lr\": -0.01");
        assert_eq!(field_of(RunConfig::from_json(&neg).unwrap_err()), "lr");

        let unknown = IRIS_CFG.replace("\"seed\": 1", "\"seed\": 1, \"momentum\": 0.5");
        assert_eq!(field_of(RunConfig::from_json(&unknown).unwrap_err()), "momentum");

        let gamma = IRIS_CFG.replace("\"gamma\": 0.1", "\"gamma\": 1.5");
        assert_eq!(field_of(RunConfig::from_json(&gamma).unwrap_err()), "gamma");

        let drop = IRIS_CFG.replace("\"lr\"", "\"dropout\": [{\"layer\": 3, \"p\": 0.2}], \"lr\"");
        assert_eq!(field_of(RunConfig::from_json(&drop).unwrap_err()), "dropout.layer");

        let batch = IRIS_CFG.replace("\"batch_size\": 16", "\"batch_size\": 0");
        assert_eq!(field_of(RunConfig::from_json(&batch).unwrap_err()), "batch_size");

        let milestones = IRIS_CFG.replace("[20, 45, 60]", "[45, 20]");
        assert_eq!(field_of(RunConfig::from_json(&milestones).unwrap_err()), "milestones");
    }

    #[test]
    fn exit_codes() {
        assert_eq!(Error::config("lr", "bad").exit_code(), 1);
        assert_eq!(Error::Data("x".into()).exit_code(), 2);
        assert_eq!(Error::Checkpoint("x".into()).exit_code(), 2);
        assert_eq!(Error::Numerical("nan".into()).exit_code(), 3);
    }

    #[test]
    fn compare_table_is_aligned() {
        let t = format_compare_table(&[
            CompareRow { dataset: DatasetName::Iris, model: ModelKind::Ffnn, accuracy: 1.0, loss: "Cross-Entropy" },
            CompareRow { dataset: DatasetName::Iris, model: ModelKind::Ugmm, accuracy: 0.9667, loss: "NLL (Generative)" },
        ]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].contains("100.00"));
        assert!(lines[2].contains("96.67"));
        assert_eq!(lines[0].find("Model"), lines[2].find("uGMM-NN"));
    }
}
