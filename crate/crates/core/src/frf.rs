//! FRF estimate container and its on-disk format.
//!
//! Files are JSON documents with one record per excited line:
//! `{freq_hz, status, blocks_used, g: [re, im, ...] row-major, cov?}`.
//! Every estimator, the truth export and the gray-box fit share it.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{fsio, linalg, CMatrix, Error, Result, C64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineStatus {
    Valid,
    /// Input Gramian (or its JIO counterpart) is numerically singular.
    SingularInput,
    /// Local regressor lost rank; a wider window is needed.
    RankDeficient,
    /// Local denominator vanishes inside the window.
    UnstableLocalFit,
    /// Ratio denominator in the JIO-LRM step is ill-conditioned.
    IllConditioned,
    /// No averaging block survived at this line.
    NoValidBlocks,
    /// Eigendecomposition failed even after perturbation.
    Defective,
    /// Logarithm requested on the branch cut.
    BranchCut,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    /// Covariance of `vec(G)`, `(n_y n_u) x (n_y n_u)`.
    Vec(CMatrix),
    /// Residual noise covariance, `n_y x n_y`.
    Residual(CMatrix),
}

impl Covariance {
    pub fn matrix(&self) -> &CMatrix {
        match self {
            Covariance::Vec(m) | Covariance::Residual(m) => m,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrfLine {
    pub g: CMatrix,
    pub cov: Option<Covariance>,
    pub status: LineStatus,
    /// Blocks or experiments that contributed to this line.
    pub blocks_used: usize,
}

impl FrfLine {
    pub fn valid(g: CMatrix, blocks_used: usize) -> Self {
        FrfLine {
            g,
            cov: None,
            status: LineStatus::Valid,
            blocks_used,
        }
    }

    /// Zero-filled placeholder for a failed line.
    pub fn invalid(n_y: usize, n_u: usize, status: LineStatus) -> Self {
        FrfLine {
            g: CMatrix::zeros(n_y, n_u),
            cov: None,
            status,
            blocks_used: 0,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.status == LineStatus::Valid
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrfEstimate {
    /// Angular frequencies (rad/s).
    pub freqs: Vec<f64>,
    pub lines: Vec<FrfLine>,
    pub method_tag: String,
    pub n_e_used: usize,
}

impl FrfEstimate {
    pub fn from_matrices(freqs: Vec<f64>, g: Vec<CMatrix>, method_tag: &str, n_e_used: usize) -> Self {
        FrfEstimate {
            freqs,
            lines: g.into_iter().map(|g| FrfLine::valid(g, n_e_used)).collect(),
            method_tag: method_tag.to_string(),
            n_e_used,
        }
    }

    pub fn n_lines(&self) -> usize {
        self.lines.len()
    }

    pub fn n_y(&self) -> usize {
        self.lines.first().map_or(0, |l| l.g.nrows())
    }

    pub fn n_u(&self) -> usize {
        self.lines.first().map_or(0, |l| l.g.ncols())
    }

    pub fn g(&self, k: usize) -> &CMatrix {
        &self.lines[k].g
    }

    pub fn valid_count(&self) -> usize {
        self.lines.iter().filter(|l| l.is_valid()).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        if self.lines.is_empty() {
            0.0
        } else {
            self.valid_count() as f64 / self.n_lines() as f64
        }
    }

    /// Whether two estimates live on the same frequency grid (1e-9 relative).
    pub fn same_grid(&self, other: &FrfEstimate) -> bool {
        self.freqs.len() == other.freqs.len()
            && self
                .freqs
                .iter()
                .zip(&other.freqs)
                .all(|(a, b)| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()))
    }

    /// Checks finiteness and covariance positive semidefiniteness.
    pub fn validate(&self) -> Result<()> {
        if self.freqs.len() != self.lines.len() {
            return Err(Error::Dimension("frequency and line counts differ".into()));
        }
        for (k, line) in self.lines.iter().enumerate() {
            if line.g.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
                return Err(Error::Dimension(format!("non-finite G at line {k}")));
            }
            if let Some(cov) = &line.cov {
                let m = cov.matrix();
                let herm = (m - m.adjoint()).norm();
                let tr: f64 = m.diagonal().iter().map(|v| v.re).sum();
                if herm > 1e-9 * (1.0 + m.norm()) {
                    return Err(Error::Dimension(format!("covariance at line {k} is not Hermitian")));
                }
                let h = (m + m.adjoint()).map(|v| v * 0.5);
                let min = linalg::hermitian_eigenvalues(&h)[0];
                if min < -1e-12 * tr.abs().max(f64::MIN_POSITIVE) {
                    return Err(Error::Dimension(format!("covariance at line {k} is indefinite")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = FrfFile {
            format: FORMAT.to_string(),
            version: 1,
            method_tag: self.method_tag.clone(),
            n_y: self.n_y(),
            n_u: self.n_u(),
            n_e_used: self.n_e_used,
            lines: self
                .freqs
                .iter()
                .zip(&self.lines)
                .map(|(&w, l)| LineRecord {
                    freq_hz: w / (2.0 * PI),
                    status: l.status,
                    blocks_used: l.blocks_used,
                    g: flatten_row_major(&l.g),
                    cov: l.cov.as_ref().map(|c| CovRecord {
                        kind: match c {
                            Covariance::Vec(_) => CovKind::Vec,
                            Covariance::Residual(_) => CovKind::Residual,
                        },
                        dim: c.matrix().nrows(),
                        data: flatten_row_major(c.matrix()),
                    }),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: FrfFile = serde_json::from_str(text)?;
        if file.format != FORMAT {
            return Err(Error::Dimension(format!("unknown FRF format '{}'", file.format)));
        }
        let mut freqs = Vec::with_capacity(file.lines.len());
        let mut lines = Vec::with_capacity(file.lines.len());
        for rec in file.lines {
            freqs.push(rec.freq_hz * 2.0 * PI);
            let g = unflatten_row_major(&rec.g, file.n_y, file.n_u)?;
            let cov = match rec.cov {
                None => None,
                Some(c) => {
                    let m = unflatten_row_major(&c.data, c.dim, c.dim)?;
                    Some(match c.kind {
                        CovKind::Vec => Covariance::Vec(m),
                        CovKind::Residual => Covariance::Residual(m),
                    })
                }
            };
            lines.push(FrfLine {
                g,
                cov,
                status: rec.status,
                blocks_used: rec.blocks_used,
            });
        }
        Ok(FrfEstimate {
            freqs,
            lines,
            method_tag: file.method_tag,
            n_e_used: file.n_e_used,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

const FORMAT: &str = "frfkit-frf";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrfFile {
    format: String,
    version: u32,
    method_tag: String,
    n_y: usize,
    n_u: usize,
    n_e_used: usize,
    lines: Vec<LineRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LineRecord {
    freq_hz: f64,
    status: LineStatus,
    blocks_used: usize,
    g: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cov: Option<CovRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum CovKind {
    Vec,
    Residual,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CovRecord {
    kind: CovKind,
    dim: usize,
    data: Vec<f64>,
}

fn flatten_row_major(m: &CMatrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)].re);
            out.push(m[(i, j)].im);
        }
    }
    out
}

fn unflatten_row_major(data: &[f64], rows: usize, cols: usize) -> Result<CMatrix> {
    if data.len() != 2 * rows * cols {
        return Err(Error::Dimension(format!(
            "expected {} numbers for a {rows}x{cols} complex matrix, got {}",
            2 * rows * cols,
            data.len()
        )));
    }
    Ok(CMatrix::from_fn(rows, cols, |i, j| {
        let o = 2 * (i * cols + j);
        C64::new(data[o], data[o + 1])
    }))
}
