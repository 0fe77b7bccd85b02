//! File formats.
//!
//! Binary files are little-endian and start with a 4-byte magic and a `u16`
//! version.
//!
//! Dataset (`CRSD`, version 1):
//!
//! ```text
//! magic "CRSD" | version u16 | J u32 | N u32 | fs_hz f64 | sigma f64
//! | normalization_scale f64 | truth flag u8 | J*N f64 samples
//! [truth: C u32 | K u32 | C*K f64 taps
//!         | per window: count u32, then count x (channel u16, sample u32, amplitude f64)]
//! ```
//!
//! Filters (`CRSF`, version 1):
//!
//! ```text
//! magic "CRSF" | version u16 | C u32 | K u32 | lambda f64 | L f64 | sigma f64 | C*K f64 taps
//! ```
//!
//! Metric logs are CSV with a header row; configurations are JSON.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::conv::{CodeMap, FilterBank};
use crate::error::{Error, Result};
use crate::eval::{MatchResult, SortReport};
use crate::grads::{GradParam, GradReport};
use crate::sim::{Dataset, GroundTruth, SpikeEvent};
use crate::train::TrainHistory;

pub const DATASET_MAGIC: [u8; 4] = *b"CRSD";
pub const FILTER_MAGIC: [u8; 4] = *b"CRSF";
pub const FORMAT_VERSION: u16 = 1;
/// Filters read back with a row norm further than this from 1 log a warning.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(LittleEndian::read_u16(self.take(2)?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(LittleEndian::read_f64(self.take(8)?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::Malformed(format!("declared array of {n} values overflows")))?;
        let raw = self.take(bytes)?;
        let mut out = vec![0.0; n];
        LittleEndian::read_f64_into(raw, &mut out);
        Ok(out)
    }

    fn header(&mut self, magic: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().expect("4 bytes");
        if found != magic {
            return Err(Error::BadMagic { expected: magic, found });
        }
        let version = self.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes after the declared payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::dim(format!("{what} = {v} does not fit the file format")))
}

fn put_header(out: &mut Vec<u8>, magic: [u8; 4]) {
    out.extend_from_slice(&magic);
    out.write_u16::<LittleEndian>(FORMAT_VERSION).expect("write to Vec");
}

fn put_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    for &v in vals {
        out.write_f64::<LittleEndian>(v).expect("write to Vec");
    }
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(40 + ds.samples().len() * 8);
    put_header(&mut out, DATASET_MAGIC);
    out.write_u32::<LittleEndian>(to_u32(ds.n_windows(), "J")?)?;
    out.write_u32::<LittleEndian>(to_u32(ds.window_len(), "N")?)?;
    out.write_f64::<LittleEndian>(ds.fs_hz)?;
    out.write_f64::<LittleEndian>(ds.sigma)?;
    out.write_f64::<LittleEndian>(ds.normalization_scale)?;
    out.write_u8(ds.truth.is_some() as u8)?;
    put_f64s(&mut out, ds.samples());
    if let Some(t) = &ds.truth {
        out.write_u32::<LittleEndian>(to_u32(t.filters.n_filters(), "C")?)?;
        out.write_u32::<LittleEndian>(to_u32(t.filters.filter_len(), "K")?)?;
        put_f64s(&mut out, t.filters.as_slice());
        for ev in &t.events {
            out.write_u32::<LittleEndian>(to_u32(ev.len(), "event count")?)?;
            for e in ev {
                let ch = u16::try_from(e.channel).map_err(|_| Error::dim("channel index exceeds u16"))?;
                out.write_u16::<LittleEndian>(ch)?;
                out.write_u32::<LittleEndian>(to_u32(e.sample, "sample")?)?;
                out.write_f64::<LittleEndian>(e.amplitude)?;
            }
        }
    }
    Ok(out)
}

pub fn decode_dataset(buf: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(buf);
    r.header(DATASET_MAGIC)?;
    let j = r.u32()? as usize;
    let n = r.u32()? as usize;
    let fs = r.f64()?;
    let sigma = r.f64()?;
    let scale = r.f64()?;
    let has_truth = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(Error::Malformed(format!("truth flag must be 0 or 1, found {other}"))),
    };
    let count = j
        .checked_mul(n)
        .ok_or_else(|| Error::Malformed(format!("J={j} x N={n} overflows")))?;
    let samples = r.f64s(count)?;
    let truth = if has_truth {
        let c = r.u32()? as usize;
        let k = r.u32()? as usize;
        let taps = r.f64s(c.checked_mul(k).ok_or_else(|| Error::Malformed("C x K overflows".into()))?)?;
        let filters = FilterBank::new(c, k, taps).map_err(|e| Error::Malformed(e.to_string()))?;
        let mut events = Vec::with_capacity(j);
        for _ in 0..j {
            let m = r.u32()? as usize;
            let mut ev = Vec::with_capacity(m.min(buf.len() / 14));
            for _ in 0..m {
                let channel = r.u16()? as usize;
                let sample = r.u32()? as usize;
                let amplitude = r.f64()?;
                ev.push(SpikeEvent {
                    channel,
                    sample,
                    amplitude,
                });
            }
            events.push(ev);
        }
        Some(GroundTruth { filters, events })
    } else {
        None
    };
    r.finish()?;
    Dataset::new(j, n, samples, sigma, fs, scale, truth).map_err(|e| Error::Malformed(e.to_string()))
}

/// Attaches the path to an I/O error.
fn at(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path).map_err(at(path))?);
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path).map_err(at(path))?.read_to_end(&mut buf).map_err(at(path))?;
    Ok(buf)
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    write_bytes(path.as_ref(), &encode_dataset(ds)?)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&read_bytes(path.as_ref())?)
}

/// Sample type of a headerless raw recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RawDtype {
    F32,
    F64,
}

impl RawDtype {
    pub fn width(self) -> usize {
        match self {
            RawDtype::F32 => 4,
            RawDtype::F64 => 8,
        }
    }
}

impl std::str::FromStr for RawDtype {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(RawDtype::F32),
            "f64" => Ok(RawDtype::F64),
            other => Err(Error::param(format!("unknown raw dtype {other:?}; expected f32 or f64"))),
        }
    }
}

/// Decodes a headerless little-endian sample stream. The length must be a
/// whole number of samples.
pub fn decode_raw(buf: &[u8], dtype: RawDtype) -> Result<Vec<f64>> {
    let w = dtype.width();
    if !buf.len().is_multiple_of(w) {
        return Err(Error::Malformed(format!(
            "{} bytes is not a whole number of {w}-byte samples",
            buf.len()
        )));
    }
    Ok(match dtype {
        RawDtype::F64 => buf.chunks_exact(8).map(LittleEndian::read_f64).collect(),
        RawDtype::F32 => buf.chunks_exact(4).map(|c| LittleEndian::read_f32(c) as f64).collect(),
    })
}

pub fn read_raw(path: impl AsRef<Path>, dtype: RawDtype) -> Result<Vec<f64>> {
    decode_raw(&read_bytes(path.as_ref())?, dtype)
}

/// Contents of a filter file.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterFile {
    pub filters: FilterBank,
    pub lambda: f64,
    pub lipschitz: f64,
    pub sigma: f64,
}

pub fn encode_filters(f: &FilterFile) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(40 + f.filters.as_slice().len() * 8);
    put_header(&mut out, FILTER_MAGIC);
    out.write_u32::<LittleEndian>(to_u32(f.filters.n_filters(), "C")?)?;
    out.write_u32::<LittleEndian>(to_u32(f.filters.filter_len(), "K")?)?;
    out.write_f64::<LittleEndian>(f.lambda)?;
    out.write_f64::<LittleEndian>(f.lipschitz)?;
    out.write_f64::<LittleEndian>(f.sigma)?;
    put_f64s(&mut out, f.filters.as_slice());
    Ok(out)
}

pub fn decode_filters(buf: &[u8]) -> Result<FilterFile> {
    let mut r = Reader::new(buf);
    r.header(FILTER_MAGIC)?;
    let c = r.u32()? as usize;
    let k = r.u32()? as usize;
    let lambda = r.f64()?;
    let lipschitz = r.f64()?;
    let sigma = r.f64()?;
    let taps = r.f64s(c.checked_mul(k).ok_or_else(|| Error::Malformed("C x K overflows".into()))?)?;
    r.finish()?;
    let filters = FilterBank::new(c, k, taps).map_err(|e| Error::Malformed(e.to_string()))?;
    let dev = filters.unit_norm_deviation();
    if dev > UNIT_NORM_TOLERANCE {
        log::warn!("filter rows deviate from unit norm by up to {dev:e}");
    }
    Ok(FilterFile {
        filters,
        lambda,
        lipschitz,
        sigma,
    })
}

pub fn write_filters(path: impl AsRef<Path>, f: &FilterFile) -> Result<()> {
    write_bytes(path.as_ref(), &encode_filters(f)?)
}

pub fn read_filters(path: impl AsRef<Path>) -> Result<FilterFile> {
    decode_filters(&read_bytes(path.as_ref())?)
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_slice(&read_bytes(path.as_ref())?)?)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(path.as_ref(), &bytes)
}

/// Columns: `epoch,train_loss,val_loss,lambda,err_0..err_{C-1}[,seconds]`.
/// Leaving out the timing column makes repeated deterministic runs produce
/// identical files.
pub fn write_history<W: Write>(out: W, h: &TrainHistory, include_timing: bool) -> Result<()> {
    let n_err = h.records.first().map_or(0, |r| r.filter_err_db.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["epoch", "train_loss", "val_loss", "lambda"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..n_err).map(|c| format!("err_{c}")));
    if include_timing {
        header.push("seconds".into());
    }
    w.write_record(&header)?;
    for r in &h.records {
        let mut row = vec![
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_loss.to_string(),
            r.lambda.to_string(),
        ];
        row.extend(r.filter_err_db.iter().map(f64::to_string));
        if include_timing {
            row.push(r.seconds.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Columns: `threshold,true_miss,false_alarm`.
pub fn write_sort_report<W: Write>(out: W, r: &SortReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["threshold", "true_miss", "false_alarm"])?;
    for i in 0..r.thresholds.len() {
        w.write_record([
            r.thresholds[i].to_string(),
            r.true_miss[i].to_string(),
            r.false_alarm[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Columns: `learned,true,shift,sign,err_db`.
pub fn write_match_result<W: Write>(out: W, m: &MatchResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["learned", "true", "shift", "sign", "err_db"])?;
    for c in 0..m.permutation.len() {
        w.write_record([
            c.to_string(),
            m.permutation[c].to_string(),
            m.shifts[c].to_string(),
            m.signs[c].to_string(),
            m.err_db[c].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Columns: `param,channel,tap,analytic,numeric,rel_err,kink`; the lambda row
/// leaves channel and tap empty.
pub fn write_grad_report<W: Write>(out: W, r: &GradReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["param", "channel", "tap", "analytic", "numeric", "rel_err", "kink"])?;
    for e in &r.entries {
        let (name, ch, tap) = match e.param {
            GradParam::Filter { channel, tap } => ("h", channel.to_string(), tap.to_string()),
            GradParam::Lambda => ("lambda", String::new(), String::new()),
        };
        w.write_record([
            name.to_string(),
            ch,
            tap,
            e.analytic.to_string(),
            e.numeric.to_string(),
            e.rel_err.to_string(),
            e.kink.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Nonzero code entries, columns `window,channel,sample,value`.
pub fn write_codes<W: Write>(out: W, codes: &[CodeMap]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["window", "channel", "sample", "value"])?;
    for (j, x) in codes.iter().enumerate() {
        for c in 0..x.channels() {
            for (n, &v) in x.channel(c).iter().enumerate() {
                if v != 0.0 {
                    w.write_record([j.to_string(), c.to_string(), n.to_string(), v.to_string()])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Opens `path` for one of the CSV writers above.
pub fn create_file(path: impl AsRef<Path>) -> Result<BufWriter<File>> {
    let path = path.as_ref();
    Ok(BufWriter::new(File::create(path).map_err(at(path))?))
}
