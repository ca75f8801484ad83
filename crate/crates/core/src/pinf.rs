//! The PINF binary feature-file format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PINF"            4 bytes magic
//! version  u16      = 1
//! flags    u16      bit 0: anchors block present
//! n        u64      record count
//! D        u32      feature width
//! [anchors]         d_text u32, then t_real and t_fake as d_text f32 each
//! n records         D f32, label u8 (0 real, 1 fake), domain u8 (0 train, 1 id_test, 2 ood_test)
//! ```

use std::fs;
use std::path::Path;

use crate::data::{AnchorRows, Domain, FeatureRecord, FeatureSet, Label};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PINF";
pub const VERSION: u16 = 1;
pub const FLAG_ANCHORS: u16 = 1;
pub const HEADER_LEN: usize = 20;

/// Bounds-checked little-endian reader that reports byte offsets on failure.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format(self.pos as u64, "size overflow"))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.pos as u64, "size overflow"))?, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn encode(set: &FeatureSet) -> Result<Vec<u8>> {
    set.validate()?;
    let dim = u32::try_from(set.dim).map_err(|_| Error::Usage("D exceeds u32".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + set.records.len() * (set.dim * 4 + 2));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let flags = if set.anchors.is_some() { FLAG_ANCHORS } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&(set.records.len() as u64).to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    if let Some(a) = &set.anchors {
        let d_text = u32::try_from(a.real.len()).map_err(|_| Error::Usage("d_text exceeds u32".into()))?;
        out.extend_from_slice(&d_text.to_le_bytes());
        for v in a.real.iter().chain(&a.fake) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for r in &set.records {
        for v in &r.x {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(r.label.as_u8());
        out.push(r.domain.as_u8());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<FeatureSet> {
    let mut rd = ByteReader::new(bytes);
    let magic = rd.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"PINF\"")));
    }
    let version = rd.u16("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let flags = rd.u16("flags")?;
    if flags & !FLAG_ANCHORS != 0 {
        return Err(Error::format(6, format!("unknown flag bits {flags:#06x}")));
    }
    let n = rd.u64("record count")?;
    let dim = rd.u32("feature width")? as usize;

    let anchors = if flags & FLAG_ANCHORS != 0 {
        let d_text = rd.u32("anchor width")? as usize;
        let real = rd.f32s(d_text, "t_real anchor")?;
        let fake = rd.f32s(d_text, "t_fake anchor")?;
        Some(AnchorRows { real, fake })
    } else {
        None
    };

    let remaining = (bytes.len() as u64).saturating_sub(rd.offset());
    let per_record = dim as u64 * 4 + 2;
    if n.checked_mul(per_record).is_none_or(|need| need > remaining) {
        return Err(Error::format(
            rd.offset(),
            format!("truncated: header promises {n} records of {per_record} bytes, {remaining} bytes left"),
        ));
    }

    let mut records = Vec::with_capacity(n as usize);
    for i in 0..n {
        let x = rd.f32s(dim, "record features")?;
        if let Some(j) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(
                rd.offset() - 4 * (dim - j) as u64,
                format!("record {i}: non-finite feature {j}"),
            ));
        }
        let at = rd.offset();
        let label = Label::from_u8(rd.u8("label")?)
            .ok_or_else(|| Error::format(at, format!("record {i}: label not in {{0,1}}")))?;
        let domain = Domain::from_u8(rd.u8("domain")?)
            .ok_or_else(|| Error::format(at + 1, format!("record {i}: domain not in {{0,1,2}}")))?;
        records.push(FeatureRecord { x, label, domain });
    }
    rd.finish()?;
    Ok(FeatureSet { dim, records, anchors })
}

pub fn write_features(path: impl AsRef<Path>, set: &FeatureSet) -> Result<()> {
    fs::write(path, encode(set)?)?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureSet> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(x: Vec<f32>, label: Label, domain: Domain) -> FeatureRecord {
        FeatureRecord { x, label, domain }
    }

    #[test]
    fn empty_file_is_header_only() {
        let set = FeatureSet::new(5, vec![]).unwrap();
        let bytes = encode(&set).unwrap();
        assert_eq!(bytes.len(), 4 + 2 + 2 + 8 + 4);
        assert_eq!(&bytes[..4], b"PINF");
        assert_eq!(decode(&bytes).unwrap(), set);
    }

    #[test]
    fn layout_is_bit_exact() {
        let mut set = FeatureSet::new(2, vec![rec(vec![1.0, -2.5], Label::Fake, Domain::OodTest)]).unwrap();
        set.anchors = Some(AnchorRows {
            real: vec![0.5],
            fake: vec![-0.5],
        });
        let b = encode(&set).unwrap();
        let mut want = b"PINF".to_vec();
        want.extend_from_slice(&[1, 0, 1, 0]);
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&0.5f32.to_le_bytes());
        want.extend_from_slice(&(-0.5f32).to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        want.extend_from_slice(&[1, 2]);
        assert_eq!(b, want);
    }

    #[test]
    fn anchor_flag_without_block_is_rejected() {
        let set = FeatureSet::new(3, vec![]).unwrap();
        let mut b = encode(&set).unwrap();
        b[6] = 1;
        match decode(&b) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let mut b = encode(&FeatureSet::new(3, vec![]).unwrap()).unwrap();
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(Error::Format { offset: 0, .. })));
        b[0] = b'P';
        b[4] = 9;
        assert!(matches!(decode(&b), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn truncation_and_bad_codes() {
        let set = FeatureSet::new(2, vec![rec(vec![1.0, 2.0], Label::Real, Domain::Train)]).unwrap();
        let b = encode(&set).unwrap();
        assert!(matches!(decode(&b[..b.len() - 1]), Err(Error::Format { .. })));
        let mut extra = b.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Format { offset: 30, .. })));
        let mut bad = b.clone();
        bad[28] = 7;
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 28, .. })));
        let mut bad = b;
        bad[29] = 3;
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 29, .. })));
    }

    #[test]
    fn inconsistent_width_rejected_on_write() {
        let set = FeatureSet {
            dim: 2,
            records: vec![rec(vec![1.0], Label::Real, Domain::Train)],
            anchors: None,
        };
        assert!(matches!(encode(&set), Err(Error::Dimension { .. })));
    }
}
