//! `TWV1` model checkpoints.
//!
//! ```text
//! "TWV1"
//! u32 manifest length, manifest (UTF-8 `key=value` lines)
//! u32 tensor count
//! per tensor: u32 name length, name, u32 ndim, u64 dims[ndim], f64 data[]
//! ```
//! All integers and floats are little-endian.

use ndarray::Array2;

use super::{BilstmModel, LocalizeError, Localizer, PositionNorm};
use crate::features::{Column, FeatureLayout};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TWV1";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_checkpoint(loc: &Localizer) -> Vec<u8> {
    let columns: Vec<String> = loc.layout.columns().iter().map(|c| c.to_string()).collect();
    let p = &loc.position_norm;
    let manifest = format!(
        "site_id={}\nf_input={}\nrng_seed={}\nposition_mean={},{}\nposition_scale={}\ncolumns={}\n",
        loc.site_id,
        loc.model.f_input,
        loc.model.rng_seed,
        p.mean.0,
        p.mean.1,
        p.scale,
        columns.join(",")
    );
    let mut out = Vec::with_capacity(16 + manifest.len() + loc.model.n_params() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, manifest.len());
    out.extend_from_slice(manifest.as_bytes());
    put_u32(&mut out, loc.model.tensors.len());
    for (name, t) in super::tensor_names().iter().zip(&loc.model.tensors) {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, 2);
        for d in [t.nrows(), t.ncols()] {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LocalizeError> {
        if self.buf.len() - self.pos < n {
            return Err(bad(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, LocalizeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64, LocalizeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn bad(msg: impl Into<String>) -> LocalizeError {
    LocalizeError::Checkpoint(msg.into())
}

fn num<T: std::str::FromStr>(s: &str, key: &str) -> Result<T, LocalizeError> {
    s.parse().map_err(|_| bad(format!("bad {key} `{s}`")))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Localizer, LocalizeError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("not a TWV1 checkpoint"));
    }
    let len = r.u32()?;
    let manifest = std::str::from_utf8(r.take(len)?).map_err(|_| bad("manifest is not UTF-8"))?;

    let (mut site_id, mut f_input, mut seed, mut mean, mut scale, mut columns) = (None, None, None, None, None, None);
    for line in manifest.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("bad manifest line `{line}`")))?;
        match k {
            "site_id" => site_id = Some(v.to_string()),
            "f_input" => f_input = Some(num::<usize>(v, k)?),
            "rng_seed" => seed = Some(num::<u64>(v, k)?),
            "position_mean" => {
                let (x, y) = v.split_once(',').ok_or_else(|| bad("bad position_mean"))?;
                mean = Some((num::<f64>(x, k)?, num::<f64>(y, k)?));
            }
            "position_scale" => scale = Some(num::<f64>(v, k)?),
            "columns" => {
                let cols = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|c| c.parse::<Column>().map_err(|e| bad(e.to_string())))
                        .collect::<Result<Vec<_>, _>>()?
                };
                columns = Some(cols);
            }
            _ => return Err(bad(format!("unknown manifest key `{k}`"))),
        }
    }
    let missing = |k: &str| bad(format!("manifest lacks {k}"));
    let site_id = site_id.ok_or_else(|| missing("site_id"))?;
    let f_input = f_input.ok_or_else(|| missing("f_input"))?;
    let seed = seed.ok_or_else(|| missing("rng_seed"))?;
    let mean = mean.ok_or_else(|| missing("position_mean"))?;
    let scale = scale.ok_or_else(|| missing("position_scale"))?;
    let columns = columns.ok_or_else(|| missing("columns"))?;
    let n_cols = columns.len();
    let layout = FeatureLayout::new(columns);
    if layout.len() != n_cols || n_cols != f_input || f_input == 0 {
        return Err(bad("column manifest does not match f_input"));
    }
    if !(scale.is_finite() && scale > 0.0 && mean.0.is_finite() && mean.1.is_finite()) {
        return Err(bad("bad position normalization"));
    }

    let names = super::tensor_names();
    let count = r.u32()?;
    if count != names.len() {
        return Err(bad(format!("expected {} tensors, found {count}", names.len())));
    }
    let mut tensors = Vec::with_capacity(count);
    for expected in &names {
        let n = r.u32()?;
        let name = r.take(n)?;
        if name != expected.as_bytes() {
            return Err(bad(format!("expected tensor {expected}")));
        }
        if r.u32()? != 2 {
            return Err(bad(format!("tensor {expected} is not 2-D")));
        }
        let (rows, cols) = (r.u64()?, r.u64()?);
        let elems = rows
            .checked_mul(cols)
            .filter(|&e| e.checked_mul(8).is_some_and(|b| b <= r.remaining() as u64))
            .ok_or_else(|| bad(format!("tensor {expected} exceeds the file")))? as usize;
        let data: Vec<f64> = r
            .take(elems * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Array2::from_shape_vec((rows as usize, cols as usize), data).map_err(|e| bad(e.to_string()))?;
        tensors.push(t);
    }
    if r.remaining() != 0 {
        return Err(bad("trailing bytes"));
    }
    Ok(Localizer {
        site_id,
        layout,
        position_norm: PositionNorm { mean, scale },
        model: BilstmModel::from_tensors(f_input, seed, tensors)?,
    })
}
