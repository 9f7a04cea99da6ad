//! Binary checkpoints for parameters, kernel matrices and NTRF perturbations.
//!
//! All matrices are stored row-major as 64-bit little-endian floats after a
//! short text header.

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::dataset::{read_f64s, split_header};
use crate::error::{Error, Result};
use crate::network::{check_shapes, NetParams};
use crate::ntk::KernelStack;
use crate::ntrf::NtrfModel;

pub const PARAMS_HEADER: &str = "ntkw-params v1";
pub const KERNEL_HEADER: &str = "ntkw-kernel v1";
pub const NTRF_HEADER: &str = "ntkw-ntrf v1";

const FLAG_SIGMA: u8 = 1;
const FLAG_THETA_TILDE: u8 = 2;

fn push_row_major(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
}

fn take_matrix<'a>(bytes: &'a [u8], rows: usize, cols: usize, what: &str) -> Result<(DMatrix<f64>, &'a [u8])> {
    let need = rows
        .checked_mul(cols)
        .and_then(|k| k.checked_mul(8))
        .ok_or_else(|| Error::Format(format!("{what} size overflows")))?;
    if bytes.len() < need {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!("{what}: need {need} bytes, have {}", bytes.len()),
        )));
    }
    let vals = read_f64s(&bytes[..need]);
    Ok((DMatrix::from_row_slice(rows, cols, &vals), &bytes[need..]))
}

fn layer_shapes(depth: usize, width: usize, dim: usize) -> Vec<(usize, usize)> {
    (0..depth)
        .map(|k| match k {
            0 => (width, dim),
            k if k + 1 == depth => (1, width),
            _ => (width, width),
        })
        .collect()
}

fn push_layers(out: &mut Vec<u8>, layers: &[DMatrix<f64>]) {
    for w in layers {
        push_row_major(out, w);
    }
}

fn take_layers<'a>(mut bytes: &'a [u8], depth: usize, width: usize, dim: usize) -> Result<(Vec<DMatrix<f64>>, &'a [u8])> {
    let mut layers = Vec::with_capacity(depth);
    for (k, (r, c)) in layer_shapes(depth, width, dim).into_iter().enumerate() {
        let (m, rest) = take_matrix(bytes, r, c, &format!("layer {}", k + 1))?;
        layers.push(m);
        bytes = rest;
    }
    Ok((layers, bytes))
}

fn no_trailing(bytes: &[u8], what: &str) -> Result<()> {
    if bytes.is_empty() {
        Ok(())
    } else {
        Err(Error::Format(format!("{} trailing bytes after {what}", bytes.len())))
    }
}

pub fn params_to_bytes(p: &NetParams) -> Vec<u8> {
    let mut out = format!(
        "{PARAMS_HEADER}\n{}\n{}\n{}\n{}\n",
        p.depth(),
        p.width(),
        p.input_dim(),
        p.seed()
    )
    .into_bytes();
    push_layers(&mut out, p.layers());
    out
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<NetParams> {
    let (f, rest) = split_header(bytes, PARAMS_HEADER, 4)?;
    let (depth, width, dim, seed) = (f[0] as usize, f[1] as usize, f[2] as usize, f[3]);
    if depth < 2 {
        return Err(Error::Format(format!("depth {depth} < 2")));
    }
    let (layers, rest) = take_layers(rest, depth, width, dim)?;
    no_trailing(rest, "parameters")?;
    NetParams::from_layers(layers, seed)
}

/// SHA-256 of the parameter checkpoint bytes, lowercase hex.
pub fn params_checksum(p: &NetParams) -> String {
    sha256_hex(&params_to_bytes(p))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// The last-layer kernel matrices as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelFile {
    pub depth: usize,
    pub theta: DMatrix<f64>,
    pub sigma: Option<DMatrix<f64>>,
    pub theta_tilde: Option<DMatrix<f64>>,
}

impl KernelFile {
    pub fn from_stack(stack: &KernelStack, with_sections: bool) -> Self {
        KernelFile {
            depth: stack.depth,
            theta: stack.theta.clone(),
            sigma: with_sections.then(|| stack.sigma_last().clone()),
            theta_tilde: with_sections.then(|| stack.theta_tilde_last().clone()),
        }
    }

    pub fn n(&self) -> usize {
        self.theta.nrows()
    }

    /// Header, `L`, `n`, then `Θ`, then a flags byte and the flagged sections.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{KERNEL_HEADER}\n{}\n{}\n", self.depth, self.n()).into_bytes();
        push_row_major(&mut out, &self.theta);
        let mut flags = 0u8;
        if self.sigma.is_some() {
            flags |= FLAG_SIGMA;
        }
        if self.theta_tilde.is_some() {
            flags |= FLAG_THETA_TILDE;
        }
        out.push(flags);
        for m in [&self.sigma, &self.theta_tilde].into_iter().flatten() {
            push_row_major(&mut out, m);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (f, rest) = split_header(bytes, KERNEL_HEADER, 2)?;
        let (depth, n) = (f[0] as usize, f[1] as usize);
        let (theta, rest) = take_matrix(rest, n, n, "kernel")?;
        let (flags, mut rest) = match rest.split_first() {
            Some((&flags, rest)) => (flags, rest),
            None => (0, rest),
        };
        if flags & !(FLAG_SIGMA | FLAG_THETA_TILDE) != 0 {
            return Err(Error::Format(format!("unknown kernel flags {flags:#04x}")));
        }
        let mut section = |bit: u8, what: &str| -> Result<Option<DMatrix<f64>>> {
            if flags & bit == 0 {
                return Ok(None);
            }
            let (m, r) = take_matrix(rest, n, n, what)?;
            rest = r;
            Ok(Some(m))
        };
        let sigma = section(FLAG_SIGMA, "sigma section")?;
        let theta_tilde = section(FLAG_THETA_TILDE, "theta-tilde section")?;
        no_trailing(rest, "kernel")?;
        Ok(KernelFile {
            depth,
            theta,
            sigma,
            theta_tilde,
        })
    }
}

/// Header, anchor checksum, `R`, `L`, `m`, `d`, then `Δ` in the parameter layout.
pub fn ntrf_to_bytes(model: &NtrfModel<'_>) -> Vec<u8> {
    let a = model.anchor();
    let mut out = format!(
        "{NTRF_HEADER}\n{}\n{:?}\n{}\n{}\n{}\n",
        params_checksum(a),
        model.radius(),
        a.depth(),
        a.width(),
        a.input_dim()
    )
    .into_bytes();
    push_layers(&mut out, model.delta());
    out
}

/// Load a perturbation against `anchor`; the anchor checksum must match.
pub fn ntrf_from_bytes<'a>(bytes: &[u8], anchor: &'a NetParams) -> Result<NtrfModel<'a>> {
    let mut lines = Vec::new();
    let mut rest = bytes;
    for _ in 0..6 {
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("truncated NTRF header".into()))?;
        lines.push(
            std::str::from_utf8(&rest[..end])
                .map_err(|_| Error::Format("NTRF header is not UTF-8".into()))?
                .to_string(),
        );
        rest = &rest[end + 1..];
    }
    if lines[0] != NTRF_HEADER {
        return Err(Error::Format(format!("header {:?}, expected {NTRF_HEADER:?}", lines[0])));
    }
    let expected = params_checksum(anchor);
    if lines[1] != expected {
        return Err(Error::Consistency(format!(
            "NTRF checkpoint was fitted on anchor {}, not {expected}",
            lines[1]
        )));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad size {s:?}")));
    let radius: f64 = lines[2]
        .parse()
        .map_err(|_| Error::Format(format!("bad radius {:?}", lines[2])))?;
    let (depth, width, dim) = (num(&lines[3])?, num(&lines[4])?, num(&lines[5])?);
    let (delta, rest) = take_layers(rest, depth, width, dim)?;
    no_trailing(rest, "NTRF perturbation")?;
    check_shapes(&delta, anchor.width(), anchor.input_dim())?;
    NtrfModel::new(anchor, delta, radius)
}
