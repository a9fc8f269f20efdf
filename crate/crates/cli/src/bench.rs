//! The scheme x transform BER matrix.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use neuroscrub::equiv::{agreement, class_balanced_inputs, compare, sample_inputs, Tolerance};
use neuroscrub::model::{gen_toy_model, Arch};
use neuroscrub::scheme::{
    ber, embed, extract, keygen, private_passport_forward, EmbedBudget, Scheme, SignatureBits, DEFAULT_SIGNATURE,
};
use neuroscrub::transform::{attack, AttackConfig, ScaleMode, TransformSet};

use crate::{write, CliError, CliResult, Format};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub scheme: Scheme,
    pub arch: Arch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widths: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub cells: Vec<CellSpec>,
    pub seeds: u64,
    pub alphas: Vec<f64>,
    /// Attack columns: `ns`, `ls`, `sf`, `unified` or any combination.
    pub transforms: Vec<String>,
    pub scale_mode: ScaleMode,
    /// Overrides the certification policy with one relative tolerance.
    pub tol_rel: Option<f64>,
    /// Inputs per equivalence check.
    pub inputs: usize,
    /// Class-balanced inputs for private-branch agreement.
    pub private_inputs: usize,
    pub model_seed: u64,
    pub key_seed: u64,
    pub signature: String,
    pub csv: Option<PathBuf>,
    pub markdown: Option<PathBuf>,
}

/// The arch each scheme is benchmarked on by default.
pub fn default_arch(s: Scheme) -> Arch {
    match s {
        Scheme::Riga => Arch::InceptionMini,
        Scheme::ScaleSign | Scheme::PassportAware => Arch::PlainCnn,
        Scheme::Deepipr => Arch::GroupnormCnn,
        Scheme::IprIc => Arch::TanhRnn,
        _ => Arch::ResnetMini,
    }
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            cells: Scheme::ALL
                .into_iter()
                .map(|scheme| CellSpec {
                    scheme,
                    arch: default_arch(scheme),
                    widths: None,
                })
                .collect(),
            seeds: 20,
            alphas: vec![1.0],
            transforms: ["ns", "ls", "sf", "unified"].map(String::from).to_vec(),
            scale_mode: ScaleMode::PowerOfTwo,
            tol_rel: None,
            inputs: 16,
            private_inputs: 64,
            model_seed: 1,
            key_seed: 7,
            signature: DEFAULT_SIGNATURE.into(),
            csv: None,
            markdown: None,
        }
    }
}

impl BenchConfig {
    pub fn load(path: &Path, bytes: &[u8]) -> CliResult<Self> {
        let text = std::str::from_utf8(bytes).map_err(|e| CliError::Config(e.to_string()))?;
        let cfg: BenchConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?
        };
        Ok(cfg)
    }

    fn columns(&self) -> CliResult<Vec<TransformSet>> {
        if self.seeds == 0 {
            return Err(CliError::Config("seeds must be at least 1".into()));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return Err(CliError::Config(format!("alpha {a} outside (0, 1]")));
        }
        if self.cells.is_empty() || self.alphas.is_empty() {
            return Err(CliError::Config("no cells to run".into()));
        }
        Ok(self.transforms.iter().map(|t| t.parse()).collect::<Result<_, _>>()?)
    }

    /// Bitwise where the transforms are exact, relative otherwise.
    fn tolerance(&self, t: TransformSet) -> Tolerance {
        if let Some(r) = self.tol_rel {
            return Tolerance::rel(r);
        }
        let exact = self.scale_mode == ScaleMode::PowerOfTwo || !t.scale;
        match (t.shuffle, t.scale || t.flip) {
            (false, _) if exact => Tolerance::Bitwise,
            (true, false) => Tolerance::rel(1e-12),
            _ => Tolerance::rel(1e-9),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ColumnStats {
    pub transforms: String,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Row {
    pub scheme: Scheme,
    pub arch: Arch,
    pub alpha: f64,
    pub ber_without: f64,
    pub columns: Vec<ColumnStats>,
    pub equivalent: bool,
    /// Lowest top-1 agreement between watermarked and attacked models.
    pub agreement: f64,
    /// Mean private-branch agreement after the unified attack.
    pub private_agreement: Option<f64>,
    /// Decoded signature after the first unified-attack seed.
    pub decoded_after: Option<String>,
    pub wall_ms: u128,
    pub error: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct AttackReport {
    pub config: BenchConfig,
    pub rows: Vec<Row>,
}

pub fn run(cfg: &BenchConfig) -> CliResult<AttackReport> {
    let columns = cfg.columns()?;
    let jobs: Vec<(usize, &CellSpec, f64)> = cfg
        .cells
        .iter()
        .enumerate()
        .flat_map(|(i, c)| cfg.alphas.iter().map(move |&a| (i, c, a)))
        .collect();
    let rows: Vec<Row> = jobs
        .par_iter()
        .map(|&(id, cell, alpha)| {
            let t = Instant::now();
            let mut row = Row {
                scheme: cell.scheme,
                arch: cell.arch,
                alpha,
                ber_without: f64::NAN,
                columns: Vec::new(),
                equivalent: false,
                agreement: f64::NAN,
                private_agreement: None,
                decoded_after: None,
                wall_ms: 0,
                error: None,
            };
            if let Err(e) = run_cell(cfg, &columns, id as u64, cell, alpha, &mut row) {
                row.error = Some(e);
            }
            row.wall_ms = t.elapsed().as_millis();
            row
        })
        .collect();
    let report = AttackReport {
        config: cfg.clone(),
        rows,
    };
    if let Some(p) = &cfg.csv {
        write(p, report.render(Format::Csv)?)?;
    }
    if let Some(p) = &cfg.markdown {
        write(p, report.render(Format::Md)?)?;
    }
    Ok(report)
}

fn run_cell(
    cfg: &BenchConfig,
    columns: &[TransformSet],
    id: u64,
    cell: &CellSpec,
    alpha: f64,
    row: &mut Row,
) -> Result<(), String> {
    let err = |e: neuroscrub::Error| e.to_string();
    let model = gen_toy_model(cell.arch, cell.widths.as_deref(), cfg.model_seed).map_err(err)?;
    let key = keygen(cell.scheme, &model, &SignatureBits::from_text(&cfg.signature), cfg.key_seed).map_err(err)?;
    let wm = embed(&model, &key, EmbedBudget::default()).map_err(err)?;
    row.ber_without = ber(&extract(&wm, &key).map_err(err)?, &key.signature).map_err(err)?;

    let xs = sample_inputs(id << 32 | 0x5eed, cfg.inputs, &wm.input_shape);
    let probe = if cell.scheme.has_private_branch() {
        Some(class_balanced_inputs(&wm, id << 32 | 0xba1, cfg.private_inputs, &wm.input_shape, 16 * cfg.private_inputs).map_err(err)?)
    } else {
        None
    };
    let mut worst_agreement = 1.0f64;
    let mut private = Vec::new();
    for &t in columns {
        let tol = cfg.tolerance(t);
        let mut bers = Vec::new();
        for s in 0..cfg.seeds {
            let ac = AttackConfig {
                seed: id << 32 | s,
                alpha,
                transforms: t,
                scale_mode: cfg.scale_mode,
            };
            let (a, _) = attack(&wm, &ac).map_err(err)?;
            let rep = compare(&wm, &a, &xs, tol).map_err(err)?;
            if !rep.passed {
                return Err(format!(
                    "{} seed {s} failed equivalence (max rel {:e})",
                    t.label(),
                    rep.max_rel_dev
                ));
            }
            worst_agreement = worst_agreement.min(rep.top1_agreement);
            let bits = extract(&a, &key).map_err(err)?;
            bers.push(ber(&bits, &key.signature).map_err(err)?);
            if t == TransformSet::ALL {
                if s == 0 {
                    row.decoded_after = Some(bits.to_text_lossy());
                }
                if let Some(p) = &probe {
                    let branch = private_passport_forward(&a, &key).map_err(err)?;
                    private.push(agreement(&a, &branch, p).map_err(err)?);
                }
            }
        }
        row.columns.push(ColumnStats {
            transforms: t.label(),
            mean: bers.iter().sum::<f64>() / bers.len() as f64,
            min: bers.iter().copied().fold(f64::INFINITY, f64::min),
            max: bers.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        });
    }
    row.equivalent = true;
    row.agreement = worst_agreement;
    if !private.is_empty() {
        row.private_agreement = Some(private.iter().sum::<f64>() / private.len() as f64);
    }
    Ok(())
}

fn heading(label: &str) -> &str {
    match label {
        "ns" => "NeuronScale",
        "ls" => "LayerShuffle",
        "sf" => "SignFlip",
        "unified" => "Unified Attack",
        other => other,
    }
}

fn num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.6}")
    }
}

impl AttackReport {
    fn labels(&self) -> Vec<String> {
        self.config
            .transforms
            .iter()
            .filter_map(|t| t.parse::<TransformSet>().ok())
            .map(TransformSet::label)
            .collect()
    }

    pub fn render(&self, format: Format) -> CliResult<String> {
        match format {
            Format::Json => serde_json::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string())),
            Format::Csv => self.csv(),
            Format::Md => Ok(self.markdown()),
        }
    }

    /// Numbers only (no timings), so equal configs give equal bytes.
    fn csv(&self) -> CliResult<String> {
        let labels = self.labels();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["scheme".to_string(), "arch".into(), "alpha".into(), "ber_without".into()];
        for l in &labels {
            header.push(format!("ber_{l}"));
            header.push(format!("ber_{l}_min"));
            header.push(format!("ber_{l}_max"));
        }
        header.extend(["equivalent", "agreement", "private_agreement", "error"].map(String::from));
        let io = |e: csv::Error| CliError::Config(e.to_string());
        w.write_record(&header).map_err(io)?;
        for r in &self.rows {
            let mut rec = vec![r.scheme.name().to_string(), r.arch.name().into(), num(r.alpha), num(r.ber_without)];
            for (i, _) in labels.iter().enumerate() {
                match r.columns.get(i) {
                    Some(c) => rec.extend([num(c.mean), num(c.min), num(c.max)]),
                    None => rec.extend([String::new(), String::new(), String::new()]),
                }
            }
            rec.push(u8::from(r.equivalent).to_string());
            rec.push(num(r.agreement));
            rec.push(r.private_agreement.map(num).unwrap_or_default());
            rec.push(r.error.clone().unwrap_or_default());
            w.write_record(&rec).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Config(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| CliError::Config(e.to_string()))
    }

    fn markdown(&self) -> String {
        let labels = self.labels();
        let mut out = String::new();
        let mut head = vec!["Scheme", "Arch", "α", "w/o. Attack"];
        head.extend(labels.iter().map(|l| heading(l)));
        head.extend(["Equivalent", "Agreement", "Private", "Time (s)"]);
        out.push_str(&format!("| {} |\n", head.join(" | ")));
        out.push_str(&format!("|{}\n", "---|".repeat(head.len())));
        for r in &self.rows {
            let mut cells = vec![r.scheme.name().to_string(), r.arch.name().into(), format!("{}", r.alpha)];
            if let Some(e) = &r.error {
                cells.push(format!("error: {}", e.replace('|', "/")));
                cells.extend(std::iter::repeat_n(String::new(), labels.len() + 3));
            } else {
                cells.push(format!("{:.3}", r.ber_without));
                cells.extend(r.columns.iter().map(|c| format!("{:.3}", c.mean)));
                cells.push(if r.equivalent { "yes" } else { "no" }.into());
                cells.push(format!("{:.3}", r.agreement));
                cells.push(r.private_agreement.map(|p| format!("{p:.3}")).unwrap_or_else(|| "-".into()));
            }
            cells.push(format!("{:.1}", r.wall_ms as f64 / 1000.0));
            out.push_str(&format!("| {} |\n", cells.join(" | ")));
        }
        let decoded: Vec<&Row> = self.rows.iter().filter(|r| r.decoded_after.is_some()).collect();
        if !decoded.is_empty() {
            out.push_str(&format!("\nSignature after one unified attack (was `{}`):\n\n", self.config.signature));
            for r in decoded {
                let text: String = r
                    .decoded_after
                    .as_deref()
                    .unwrap_or_default()
                    .chars()
                    .map(|c| if c == '`' { '.' } else { c })
                    .collect();
                out.push_str(&format!("- {} (α = {}): `{text}`\n", r.scheme, r.alpha));
            }
        }
        out
    }
}
