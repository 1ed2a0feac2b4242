//! Binary model file.
//!
//! All integers and floats are little-endian; matrices are row-major.
//!
//! ```text
//! "LBPM"                      4 bytes
//! version                     u32
//! K, D, M, N, F               u64 each
//! gate mode                   u32   (0 = global, 1 = per-user)
//! lambda, distance clamp      f64 each
//! dataset fingerprint         32 bytes
//! time_bins                   u64
//! utc_offset_hours            f64
//! category labels             label list
//! user ids                    label list
//! poi ids                     label list
//! poi categories              N x u32 (u32::MAX = none)
//! poi coordinates             N x (lat f64, lon f64)
//! spatial fit                 u64 flag, then a, k, r_squared, max_distance_km as f64
//! per pattern s = 0..K:       U (M x D), Vlu (N x D), Vli (N x D), Vil (N x D), rho
//! gate weights                K x F (global) or M x K x F (per-user)
//! ```
//!
//! A label list is a u64 count followed by, per label, a u64 byte length and
//! the UTF-8 bytes.

use std::io::{Read, Write};

use crate::checkin::Poi;
use crate::error::{Error, Result};
use crate::features::FeatureSchema;
use crate::model::{Factors, GateMode, GateParams, ModelMeta, ModelParams, PatternParams};
use crate::spatial::PowerLawFit;

pub const MAGIC: &[u8; 4] = b"LBPM";
pub const FORMAT_VERSION: u32 = 1;

const NO_CATEGORY: u32 = u32::MAX;

fn label_list_len(labels: impl Iterator<Item = usize>) -> usize {
    8 + labels.map(|len| 8 + len).sum::<usize>()
}

/// Exact size in bytes of the serialized model.
pub fn encoded_len(model: &ModelParams) -> usize {
    let (k, d, m, n) = (model.num_patterns(), model.dim(), model.num_users(), model.num_pois());
    let header = 4 + 4 + 5 * 8 + 4 + 2 * 8 + 32 + 8 + 8;
    let labels = label_list_len(model.schema.categories.iter().map(String::len))
        + label_list_len(model.meta.user_ids.iter().map(String::len))
        + label_list_len(model.meta.pois.iter().map(|p| p.id.len()));
    let poi_tables = n * 4 + n * 16;
    let fit = 8 + 4 * 8;
    let patterns = k * ((m + 3 * n) * d + 1) * 8;
    let gate = model.gate.as_slice().len() * 8;
    header + labels + poi_tables + fit + patterns + gate
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn floats(&mut self, vs: &[f64]) {
        self.buf.reserve(vs.len() * 8);
        for &v in vs {
            self.f64(v);
        }
    }
    fn labels<'a>(&mut self, labels: impl ExactSizeIterator<Item = &'a str>) {
        self.u64(labels.len() as u64);
        for l in labels {
            self.u64(l.len() as u64);
            self.buf.extend_from_slice(l.as_bytes());
        }
    }
}

pub fn serialize(model: &ModelParams) -> Vec<u8> {
    let mut w = Writer {
        buf: Vec::with_capacity(encoded_len(model)),
    };
    w.buf.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    for v in [
        model.num_patterns(),
        model.dim(),
        model.num_users(),
        model.num_pois(),
        model.num_features(),
    ] {
        w.u64(v as u64);
    }
    w.u32(match model.mode() {
        GateMode::Global => 0,
        GateMode::PerUser => 1,
    });
    w.f64(model.lambda_theta);
    w.f64(model.min_distance_km);
    w.buf.extend_from_slice(&model.meta.fingerprint);
    w.u64(model.schema.time_bins as u64);
    w.f64(model.schema.utc_offset_hours);
    w.labels(model.schema.categories.iter().map(String::as_str));
    w.labels(model.meta.user_ids.iter().map(String::as_str));
    w.labels(model.meta.pois.iter().map(|p| p.id.as_str()));
    for p in &model.meta.pois {
        w.u32(p.category.unwrap_or(NO_CATEGORY));
    }
    for p in &model.meta.pois {
        w.f64(p.lat);
        w.f64(p.lon);
    }
    match &model.meta.spatial_fit {
        Some(fit) => {
            w.u64(1);
            w.floats(&[fit.a, fit.k, fit.r_squared, fit.max_distance_km]);
        }
        None => {
            w.u64(0);
            w.floats(&[0.0; 4]);
        }
    }
    for p in &model.patterns {
        w.floats(p.user_factors.as_slice());
        w.floats(p.next_user_factors.as_slice());
        w.floats(p.next_prev_factors.as_slice());
        w.floats(p.prev_factors.as_slice());
        w.f64(p.rho);
    }
    w.floats(model.gate.as_slice());
    w.buf
}

pub fn write_model<W: Write>(model: &ModelParams, mut out: W) -> Result<()> {
    out.write_all(&serialize(model))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated stream while reading {what} at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn usize(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Format(format!("{what} does not fit in memory")))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn floats(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(
            count.checked_mul(8).ok_or_else(|| Error::Format(format!("{what} too large")))?,
            what,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn labels(&mut self, what: &str) -> Result<Vec<String>> {
        let count = self.usize(what)?;
        // each label needs at least its 8-byte length
        if count > (self.bytes.len() - self.pos) / 8 {
            return Err(Error::Format(format!("truncated stream while reading {what}")));
        }
        (0..count)
            .map(|_| {
                let len = self.usize(what)?;
                let raw = self.take(len, what)?;
                String::from_utf8(raw.to_vec()).map_err(|_| Error::Format(format!("{what}: invalid UTF-8")))
            })
            .collect()
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "unsupported format version: bad magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let k = r.usize("K")?;
    let d = r.usize("D")?;
    let m = r.usize("M")?;
    let n = r.usize("N")?;
    let f = r.usize("F")?;
    let mode = match r.u32("gate mode")? {
        0 => GateMode::Global,
        1 => GateMode::PerUser,
        other => return Err(Error::Format(format!("unknown gate mode {other}"))),
    };
    let lambda_theta = r.f64("lambda")?;
    let min_distance_km = r.f64("distance clamp")?;
    let fingerprint: [u8; 32] = r.take(32, "fingerprint")?.try_into().unwrap();
    let time_bins = r.usize("time_bins")?;
    let utc_offset_hours = r.f64("utc offset")?;
    let categories = r.labels("category labels")?;
    let user_ids = r.labels("user ids")?;
    let poi_ids = r.labels("poi ids")?;

    if k == 0 || d == 0 {
        return Err(Error::Format("dimension inconsistency: K and D must be positive".into()));
    }
    if user_ids.len() != m || poi_ids.len() != n {
        return Err(Error::Format(format!(
            "dimension inconsistency: header says M={m}, N={n} but tables hold {} users and {} POIs",
            user_ids.len(),
            poi_ids.len()
        )));
    }
    let schema = FeatureSchema::new(time_bins, utc_offset_hours, categories)
        .map_err(|e| Error::Format(format!("bad feature schema: {e}")))?;
    if schema.total_features() != f {
        return Err(Error::Format(format!(
            "dimension inconsistency: F={f} but schema implies {}",
            schema.total_features()
        )));
    }

    let mut poi_categories = Vec::with_capacity(n);
    for _ in 0..n {
        let c = r.u32("poi categories")?;
        if c != NO_CATEGORY && c as usize >= schema.category_slots() {
            return Err(Error::Format(format!("poi category {c} outside vocabulary")));
        }
        poi_categories.push((c != NO_CATEGORY).then_some(c));
    }
    let coords = r.floats(2 * n, "poi coordinates")?;
    let pois = poi_ids
        .into_iter()
        .zip(poi_categories)
        .enumerate()
        .map(|(p, (id, category))| Poi {
            id,
            lat: coords[2 * p],
            lon: coords[2 * p + 1],
            category,
        })
        .collect();

    let has_fit = r.u64("spatial fit flag")?;
    let fit = r.floats(4, "spatial fit")?;
    let spatial_fit = match has_fit {
        0 => None,
        1 => Some(PowerLawFit {
            a: fit[0],
            k: fit[1],
            r_squared: fit[2],
            max_distance_km: fit[3],
        }),
        other => return Err(Error::Format(format!("bad spatial fit flag {other}"))),
    };

    let matrix = |r: &mut Reader, rows: usize, what: &str| -> Result<Factors> {
        let count = rows
            .checked_mul(d)
            .ok_or_else(|| Error::Format(format!("{what} too large")))?;
        Ok(Factors::from_vec(rows, d, r.floats(count, what)?))
    };
    let mut patterns = Vec::with_capacity(k.min(1024));
    for _ in 0..k {
        patterns.push(PatternParams {
            user_factors: matrix(&mut r, m, "user factors")?,
            next_user_factors: matrix(&mut r, n, "next/user factors")?,
            next_prev_factors: matrix(&mut r, n, "next/prev factors")?,
            prev_factors: matrix(&mut r, n, "prev factors")?,
            rho: r.f64("rho")?,
        });
    }

    let mut gate = GateParams::zeros(mode, k, f, m);
    let weights = r.floats(gate.as_slice().len(), "gate weights")?;
    gate.as_mut_slice().copy_from_slice(&weights);

    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "dimension inconsistency: {} trailing bytes",
            bytes.len() - r.pos
        )));
    }

    Ok(ModelParams {
        patterns,
        gate,
        schema,
        lambda_theta,
        min_distance_km,
        meta: ModelMeta {
            user_ids,
            pois,
            fingerprint,
            spatial_fit,
        },
    })
}

pub fn read_model<R: Read>(mut input: R) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    deserialize(&bytes)
}
