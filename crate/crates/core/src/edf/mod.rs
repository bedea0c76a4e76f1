//! EDF / EDF+ reading and writing.
//!
//! Layout: a 256-byte ASCII main header, 256 bytes of per-signal header per
//! signal (stored field-major), then data records holding each signal's
//! samples as 16-bit little-endian two's-complement integers. Digital values
//! map linearly onto the physical range declared in the signal header.

pub mod hypnogram;
pub mod resample;

use std::collections::BTreeSet;

use crate::error::{Error, Result};

pub use hypnogram::{map_hypnogram, Annotation, EPOCH_S};
pub use resample::resample;

pub const ANNOTATION_LABEL: &str = "EDF Annotations";
const MAIN_HEADER: usize = 256;
const SIGNAL_HEADER: usize = 256;

/// Linear digital→physical mapping of one EDF signal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scaling {
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i32,
    pub digital_max: i32,
}

impl Scaling {
    pub fn gain(&self) -> f64 {
        (self.physical_max - self.physical_min) / (self.digital_max - self.digital_min) as f64
    }

    pub fn to_physical(&self, digital: i16) -> f64 {
        self.physical_min + (digital as i32 - self.digital_min) as f64 * self.gain()
    }

    /// Nearest representable digital value.
    pub fn to_digital(&self, physical: f64) -> i16 {
        let d = ((physical - self.physical_min) / self.gain()).round() as i64 + self.digital_min as i64;
        d.clamp(self.digital_min as i64, self.digital_max as i64) as i16
    }

    /// Full 16-bit range spanning `[lo, hi]` (widened when degenerate).
    pub fn spanning(lo: f64, hi: f64) -> Self {
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 1.0, lo + 1.0) };
        Scaling {
            physical_min: lo,
            physical_max: hi,
            digital_min: -32768,
            digital_max: 32767,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Channel {
    pub name: String,
    pub sample_rate_hz: f64,
    pub samples: Vec<f64>,
    pub physical_dimension: String,
    /// Present when the samples came from (or are destined for) EDF storage.
    pub scaling: Option<Scaling>,
}

impl Channel {
    pub fn new(name: impl Into<String>, sample_rate_hz: f64, samples: Vec<f64>) -> Self {
        Channel {
            name: name.into(),
            sample_rate_hz,
            samples,
            physical_dimension: "uV".into(),
            scaling: None,
        }
    }
}

/// A parsed polysomnography record.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub id: String,
    pub patient: String,
    pub channels: Vec<Channel>,
    pub duration_s: f64,
    /// EDF+ annotations, in file order.
    pub annotations: Vec<Annotation>,
}

impl Recording {
    pub fn channel(&self, name: &str) -> Result<&Channel> {
        self.channels
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::MissingChannel(name.to_string()))
    }

    pub fn channel_names(&self) -> Vec<&str> {
        self.channels.iter().map(|c| c.name.as_str()).collect()
    }

    /// Adds `out = a - b`, sample-wise (e.g. re-referencing two EEG leads).
    pub fn derive_channel(mut self, a: &str, b: &str, out: &str) -> Result<Recording> {
        let (ca, cb) = (self.channel(a)?, self.channel(b)?);
        if ca.sample_rate_hz != cb.sample_rate_hz {
            return Err(Error::RateMismatch(format!(
                "`{a}` at {} Hz vs `{b}` at {} Hz",
                ca.sample_rate_hz, cb.sample_rate_hz
            )));
        }
        if ca.samples.len() != cb.samples.len() {
            return Err(Error::Data(format!("`{a}` and `{b}` differ in length")));
        }
        if self.channels.iter().any(|c| c.name == out) {
            return Err(Error::Data(format!("channel `{out}` already exists")));
        }
        let samples = ca.samples.iter().zip(&cb.samples).map(|(x, y)| x - y).collect();
        let mut derived = Channel::new(out, ca.sample_rate_hz, samples);
        derived.physical_dimension = ca.physical_dimension.clone();
        self.channels.push(derived);
        Ok(self)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn field(&self, offset: usize, len: usize) -> Result<&'a str> {
        let raw = self
            .bytes
            .get(offset..offset + len)
            .ok_or_else(|| Error::edf(self.bytes.len(), "truncated header"))?;
        std::str::from_utf8(raw)
            .map(str::trim)
            .map_err(|_| Error::edf(offset, "header field is not ASCII"))
    }

    fn number<N: std::str::FromStr>(&self, offset: usize, len: usize, what: &str) -> Result<N> {
        let s = self.field(offset, len)?;
        s.parse().map_err(|_| Error::edf(offset, format!("non-numeric {what} field `{s}`")))
    }
}

struct SignalHeader {
    label: String,
    dimension: String,
    scaling: Scaling,
    samples_per_record: usize,
}

/// Parses a complete EDF or EDF+ file.
pub fn parse_edf(bytes: &[u8]) -> Result<Recording> {
    if bytes.len() < MAIN_HEADER {
        return Err(Error::edf(bytes.len(), "truncated file: main header needs 256 bytes"));
    }
    let c = Cursor { bytes };
    let version = c.field(0, 8)?;
    if version != "0" {
        return Err(Error::edf(0, format!("unsupported version `{version}`")));
    }
    let patient = c.field(8, 80)?.to_string();
    let recording_id = c.field(88, 80)?.to_string();
    let header_bytes: usize = c.number(184, 8, "header size")?;
    let declared_records: i64 = c.number(236, 8, "record count")?;
    let record_duration: f64 = c.number(244, 8, "record duration")?;
    let ns: usize = c.number(252, 4, "signal count")?;
    if header_bytes != MAIN_HEADER + ns * SIGNAL_HEADER {
        return Err(Error::edf(
            184,
            format!("header size {header_bytes} inconsistent with {ns} signals"),
        ));
    }
    if bytes.len() < header_bytes {
        return Err(Error::edf(bytes.len(), "truncated file: signal headers incomplete"));
    }

    // Signal header fields are laid out field-major: all labels, then all
    // transducers, and so on.
    let widths = [16usize, 80, 8, 8, 8, 8, 8, 80, 8, 32];
    let mut starts = [0usize; 10];
    let mut acc = MAIN_HEADER;
    for (i, w) in widths.iter().enumerate() {
        starts[i] = acc;
        acc += w * ns;
    }
    let mut headers = Vec::with_capacity(ns);
    for s in 0..ns {
        let at = |field: usize| starts[field] + s * widths[field];
        let scaling = Scaling {
            physical_min: c.number(at(3), 8, "physical minimum")?,
            physical_max: c.number(at(4), 8, "physical maximum")?,
            digital_min: c.number(at(5), 8, "digital minimum")?,
            digital_max: c.number(at(6), 8, "digital maximum")?,
        };
        if scaling.digital_max <= scaling.digital_min {
            return Err(Error::edf(at(5), "digital maximum must exceed digital minimum"));
        }
        headers.push(SignalHeader {
            label: c.field(at(0), 16)?.to_string(),
            dimension: c.field(at(2), 8)?.to_string(),
            scaling,
            samples_per_record: c.number(at(8), 8, "samples per record")?,
        });
    }

    let record_bytes: usize = headers.iter().map(|h| h.samples_per_record * 2).sum();
    let data = &bytes[header_bytes..];
    let records = if declared_records < 0 {
        // Record count unknown (-1): infer from the payload.
        if record_bytes == 0 || !data.len().is_multiple_of(record_bytes) {
            return Err(Error::edf(bytes.len(), "payload is not a whole number of data records"));
        }
        data.len() / record_bytes
    } else {
        declared_records as usize
    };
    let needed = records * record_bytes;
    if data.len() < needed {
        return Err(Error::edf(
            bytes.len(),
            format!("data length mismatch: {records} records need {needed} bytes, found {}", data.len()),
        ));
    }
    if data.len() > needed {
        return Err(Error::edf(header_bytes + needed, "trailing bytes after last data record"));
    }

    let mut names = BTreeSet::new();
    let mut channels = Vec::new();
    let mut annotation_signals = Vec::new();
    for (s, h) in headers.iter().enumerate() {
        if h.label == ANNOTATION_LABEL {
            annotation_signals.push(s);
            continue;
        }
        if !names.insert(h.label.clone()) {
            return Err(Error::edf(starts[0] + s * 16, format!("duplicate channel label `{}`", h.label)));
        }
        let rate = if record_duration > 0.0 {
            h.samples_per_record as f64 / record_duration
        } else {
            0.0
        };
        channels.push(Channel {
            name: h.label.clone(),
            sample_rate_hz: rate,
            samples: Vec::with_capacity(records * h.samples_per_record),
            physical_dimension: h.dimension.clone(),
            scaling: Some(h.scaling),
        });
    }

    let mut annotations = Vec::new();
    let mut offset = 0;
    for _ in 0..records {
        let mut ch = 0;
        for (s, h) in headers.iter().enumerate() {
            let len = h.samples_per_record * 2;
            let chunk = &data[offset..offset + len];
            if annotation_signals.contains(&s) {
                annotations.extend(hypnogram::parse_tal_block(chunk, header_bytes + offset)?);
            } else {
                let channel = &mut channels[ch];
                channel.samples.extend(
                    chunk
                        .chunks_exact(2)
                        .map(|b| h.scaling.to_physical(i16::from_le_bytes([b[0], b[1]]))),
                );
                ch += 1;
            }
            offset += len;
        }
    }

    Ok(Recording {
        id: recording_id,
        patient,
        channels,
        duration_s: records as f64 * record_duration,
        annotations,
    })
}

/// Record layout for [`write_edf`].
#[derive(Clone, Copy, Debug)]
pub struct WriteOptions {
    pub record_duration_s: f64,
}

impl Default for WriteOptions {
    fn default() -> Self {
        WriteOptions { record_duration_s: 30.0 }
    }
}

fn put(buf: &mut Vec<u8>, text: &str, width: usize) {
    let mut field: Vec<u8> = text.bytes().take(width).collect();
    field.resize(width, b' ');
    buf.extend(field);
}

fn fmt_num(v: f64) -> String {
    let s = format!("{v}");
    if s.len() <= 8 {
        return s;
    }
    for prec in (0..8).rev() {
        let s = format!("{v:.prec$}");
        if s.len() <= 8 {
            return s;
        }
    }
    format!("{v:.0}")
}

/// Serializes a recording as EDF (or EDF+ when it carries annotations).
///
/// Channels without a stored [`Scaling`] are quantized onto the full 16-bit
/// range spanning their observed values. Every channel must contain a whole
/// number of records at its sample rate.
pub fn write_edf(rec: &Recording, options: WriteOptions) -> Result<Vec<u8>> {
    let dur = options.record_duration_s;
    let mut spr = Vec::with_capacity(rec.channels.len());
    for ch in &rec.channels {
        let per = ch.sample_rate_hz * dur;
        if (per - per.round()).abs() > 1e-9 || per < 1.0 {
            return Err(Error::Data(format!(
                "`{}`: {} Hz is not a whole number of samples per record",
                ch.name, ch.sample_rate_hz
            )));
        }
        spr.push(per.round() as usize);
    }
    let records = match rec.channels.first() {
        Some(ch) => ch.samples.len().div_ceil(spr[0]),
        None => (rec.duration_s / dur).ceil() as usize,
    };
    for (ch, &n) in rec.channels.iter().zip(&spr) {
        if ch.samples.len() != records * n {
            return Err(Error::Data(format!("`{}` does not fill {records} whole records", ch.name)));
        }
    }
    let scalings: Vec<Scaling> = rec
        .channels
        .iter()
        .map(|ch| {
            ch.scaling.unwrap_or_else(|| {
                let lo = ch.samples.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = ch.samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                Scaling::spanning(lo.min(0.0), hi.max(0.0))
            })
        })
        .collect();

    let tal_blocks = (!rec.annotations.is_empty()).then(|| hypnogram::tal_blocks(&rec.annotations, records, dur));
    let tal_spr = tal_blocks
        .as_ref()
        .map(|blocks| blocks.iter().map(Vec::len).max().unwrap_or(0).div_ceil(2));
    let ns = rec.channels.len() + usize::from(tal_blocks.is_some());

    let mut buf = Vec::new();
    put(&mut buf, "0", 8);
    put(&mut buf, &rec.patient, 80);
    put(&mut buf, &rec.id, 80);
    put(&mut buf, "01.01.00", 8);
    put(&mut buf, "00.00.00", 8);
    put(&mut buf, &(MAIN_HEADER + ns * SIGNAL_HEADER).to_string(), 8);
    put(&mut buf, if tal_blocks.is_some() { "EDF+C" } else { "" }, 44);
    put(&mut buf, &records.to_string(), 8);
    put(&mut buf, &fmt_num(dur), 8);
    put(&mut buf, &ns.to_string(), 4);

    let mut labels: Vec<&str> = rec.channels.iter().map(|c| c.name.as_str()).collect();
    let mut dims: Vec<&str> = rec.channels.iter().map(|c| c.physical_dimension.as_str()).collect();
    let mut sc = scalings.clone();
    let mut counts = spr.clone();
    if let Some(n) = tal_spr {
        labels.push(ANNOTATION_LABEL);
        dims.push("");
        sc.push(Scaling {
            physical_min: -1.0,
            physical_max: 1.0,
            digital_min: -32768,
            digital_max: 32767,
        });
        counts.push(n);
    }
    labels.iter().for_each(|l| put(&mut buf, l, 16));
    labels.iter().for_each(|_| put(&mut buf, "", 80));
    dims.iter().for_each(|d| put(&mut buf, d, 8));
    sc.iter().for_each(|s| put(&mut buf, &fmt_num(s.physical_min), 8));
    sc.iter().for_each(|s| put(&mut buf, &fmt_num(s.physical_max), 8));
    sc.iter().for_each(|s| put(&mut buf, &s.digital_min.to_string(), 8));
    sc.iter().for_each(|s| put(&mut buf, &s.digital_max.to_string(), 8));
    labels.iter().for_each(|_| put(&mut buf, "", 80));
    counts.iter().for_each(|n| put(&mut buf, &n.to_string(), 8));
    labels.iter().for_each(|_| put(&mut buf, "", 32));

    for r in 0..records {
        for ((ch, &n), s) in rec.channels.iter().zip(&spr).zip(&scalings) {
            for &v in &ch.samples[r * n..(r + 1) * n] {
                buf.extend(s.to_digital(v).to_le_bytes());
            }
        }
        if let (Some(blocks), Some(n)) = (&tal_blocks, tal_spr) {
            let mut block = blocks[r].clone();
            block.resize(n * 2, 0);
            buf.extend(block);
        }
    }
    Ok(buf)
}
