//! Analytic parameter and multiply-add accounting for the recurrent cells.
//!
//! Conventions: a `k×k` convolution costs `k²·C_in·C_out·h·w` MACs per frame,
//! a depthwise one `k²·C·h·w`, a dense layer its weight count. Biases count
//! as parameters but not as MACs. Gate nonlinearities and elementwise
//! products are not counted.
//!
//! Layer names match the parameter names the cells in [`crate::cells`]
//! allocate, with each bias folded into the layer it follows.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cells::SqueezeFactorization;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    DenseLstm,
    DenseGru,
    ConvGru,
    SqueezedGru,
}

impl CellKind {
    pub const ALL: [CellKind; 4] = [
        CellKind::DenseLstm,
        CellKind::DenseGru,
        CellKind::ConvGru,
        CellKind::SqueezedGru,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CellKind::DenseLstm => "lstm",
            CellKind::DenseGru => "gru",
            CellKind::ConvGru => "conv_gru",
            CellKind::SqueezedGru => "squeezed_gru",
        }
    }

    pub fn is_dense(self) -> bool {
        matches!(self, CellKind::DenseLstm | CellKind::DenseGru)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellConfig {
    pub kind: CellKind,
    pub in_channels: usize,
    pub hidden: usize,
    /// Ignored by dense cells.
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default)]
    pub factorization: SqueezeFactorization,
}

fn default_kernel() -> usize {
    crate::cells::DEFAULT_KERNEL
}

impl CellConfig {
    pub fn new(kind: CellKind, in_channels: usize, hidden: usize, kernel: usize) -> Self {
        CellConfig {
            kind,
            in_channels,
            hidden,
            kernel,
            factorization: SqueezeFactorization::PerGate,
        }
    }

    pub fn with_factorization(mut self, f: SqueezeFactorization) -> Self {
        self.factorization = f;
        self
    }

    /// `hidden = 0` is accepted and describes an empty cell.
    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || (!self.kind.is_dense() && self.kernel == 0) {
            return Err(Error::invalid(format!(
                "{}: need positive in_channels and kernel, got in={} k={}",
                self.kind.name(),
                self.in_channels,
                self.kernel
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub notes: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub config: CellConfig,
    pub spatial: (usize, usize),
    pub sequence_len: usize,
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    pub total_macs: u64,
}

struct Builder {
    pixels: u64,
    frames: u64,
    layers: Vec<LayerCost>,
}

impl Builder {
    fn push(&mut self, name: String, weights: u64, bias: u64, macs_per_pixel: u64, notes: &str) {
        self.layers.push(LayerCost {
            name,
            params: weights + bias,
            macs: macs_per_pixel * self.pixels * self.frames,
            notes: notes.to_string(),
        });
    }
}

/// Parameters, with MACs for a single 1×1 frame.
pub fn count_params(cfg: &CellConfig) -> Result<CostReport> {
    count_macs(cfg, (1, 1), 1)
}

/// Costs for `sequence_len` frames of `spatial` size. Dense cells act on
/// vectors, so their MACs ignore `spatial`.
pub fn count_macs(cfg: &CellConfig, spatial: (usize, usize), sequence_len: usize) -> Result<CostReport> {
    cfg.validate()?;
    if spatial.0 == 0 || spatial.1 == 0 || sequence_len == 0 {
        return Err(Error::invalid(format!(
            "count_macs: need positive spatial dims and sequence length, got {}x{} x {}",
            spatial.0, spatial.1, sequence_len
        )));
    }
    let (inp, hid, k) = (cfg.in_channels as u64, cfg.hidden as u64, cfg.kernel as u64);
    let k2 = k * k;
    let mut b = Builder {
        pixels: if cfg.kind.is_dense() {
            1
        } else {
            (spatial.0 * spatial.1) as u64
        },
        frames: sequence_len as u64,
        layers: Vec::new(),
    };
    match cfg.kind {
        CellKind::DenseLstm | CellKind::DenseGru => {
            let gates: &[&str] = if cfg.kind == CellKind::DenseLstm {
                &["i", "f", "g", "o"]
            } else {
                &["z", "r", "h"]
            };
            for g in gates {
                let w = (inp + hid) * hid;
                b.push(format!("{g}.matrix"), w, hid, w, "dense");
            }
        }
        CellKind::ConvGru => {
            for g in ["z", "r", "h"] {
                let w = k2 * (inp + hid) * hid;
                b.push(format!("{g}.kernel"), w, hid, w, "conv k x k");
            }
        }
        CellKind::SqueezedGru => match cfg.factorization {
            SqueezeFactorization::PerGate => {
                for g in ["z", "r", "h"] {
                    let w = (inp + hid) * hid;
                    b.push(format!("{g}.reduce"), w, 0, w, "conv 1x1");
                    b.push(format!("{g}.depthwise"), k2 * hid, 0, k2 * hid, "depthwise k x k");
                    b.push(format!("{g}.pointwise"), hid * hid, hid, hid * hid, "conv 1x1");
                }
            }
            SqueezeFactorization::SharedInput => {
                b.push("input_reduce".into(), inp * hid, 0, inp * hid, "conv 1x1, shared");
                let c = 2 * hid;
                for g in ["z", "r", "h"] {
                    b.push(format!("{g}.depthwise"), k2 * c, 0, k2 * c, "depthwise k x k");
                    b.push(format!("{g}.pointwise"), c * hid, hid, c * hid, "conv 1x1");
                }
            }
        },
    }
    let total_params = b.layers.iter().map(|l| l.params).sum();
    let total_macs = b.layers.iter().map(|l| l.macs).sum();
    Ok(CostReport {
        config: *cfg,
        spatial,
        sequence_len,
        layers: b.layers,
        total_params,
        total_macs,
    })
}

/// Configuration for [`table1_report`], read from JSON by the CLI.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    pub dense_in_channels: usize,
    pub dense_hidden: usize,
    pub in_channels: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub height: usize,
    pub width: usize,
    pub sequence_len: usize,
    pub factorization: SqueezeFactorization,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            dense_in_channels: 1024,
            dense_hidden: 1024,
            in_channels: 1024,
            hidden: 256,
            kernel: 3,
            height: 10,
            width: 10,
            sequence_len: 1,
            factorization: SqueezeFactorization::PerGate,
        }
    }
}

impl CostConfig {
    pub fn cell(&self, kind: CellKind) -> CellConfig {
        let (inp, hid) = if kind.is_dense() {
            (self.dense_in_channels, self.dense_hidden)
        } else {
            (self.in_channels, self.hidden)
        };
        CellConfig::new(kind, inp, hid, self.kernel).with_factorization(self.factorization)
    }
}

/// Published temporal-module parameter counts.
pub fn paper_params(kind: CellKind) -> u64 {
    match kind {
        CellKind::DenseLstm => 8_410_000,
        CellKind::DenseGru => 6_330_000,
        CellKind::ConvGru => 29_490_000,
        CellKind::SqueezedGru => 670_000,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub variant: String,
    pub params: u64,
    pub macs: u64,
    pub paper_params: u64,
    /// `params` relative to the dense GRU row.
    pub ratio: f64,
}

pub fn table1_rows(cfg: &CostConfig) -> Result<Vec<Table1Row>> {
    let spatial = (cfg.height, cfg.width);
    let reports = CellKind::ALL
        .iter()
        .map(|&k| count_macs(&cfg.cell(k), spatial, cfg.sequence_len))
        .collect::<Result<Vec<_>>>()?;
    let gru = reports[1].total_params;
    Ok(CellKind::ALL
        .iter()
        .zip(&reports)
        .map(|(&k, r)| Table1Row {
            variant: k.name().to_string(),
            params: r.total_params,
            macs: r.total_macs,
            paper_params: paper_params(k),
            ratio: if gru == 0 {
                f64::NAN
            } else {
                // Six decimals keep the CSV readable and stable.
                (r.total_params as f64 / gru as f64 * 1e6).round() / 1e6
            },
        })
        .collect())
}

pub fn write_table1_csv<W: std::io::Write>(writer: W, rows: &[Table1Row]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn table1_report(output_path: &Path, cfg: &CostConfig) -> Result<Vec<Table1Row>> {
    let rows = table1_rows(cfg)?;
    let file = std::fs::File::create(output_path)?;
    write_table1_csv(file, &rows)?;
    Ok(rows)
}
