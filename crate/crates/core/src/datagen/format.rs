//! `FMD1` dataset files and `FMM1` availability-mask files.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Dataset, MissingMatrix, ModalSample};
use crate::codec::{FormatError, Reader, Writer};

pub const DATASET_MAGIC: &[u8; 4] = b"FMD1";
pub const MISSING_MAGIC: &[u8; 4] = b"FMM1";

fn invalid(offset: usize, detail: impl Into<alloc::string::String>) -> FormatError {
    FormatError::Invalid {
        offset,
        detail: detail.into(),
    }
}

pub fn encode_dataset(d: &Dataset) -> Vec<u8> {
    let mut w = Writer::new(DATASET_MAGIC);
    for v in [d.len(), d.num_modalities, d.num_classes, d.d_in] {
        w.u32(v as u32);
    }
    for s in &d.samples {
        w.u32(s.label as u32);
        let presence: Vec<u8> = s.presence.iter().map(|&p| u8::from(p)).collect();
        w.bytes(&presence);
        for x in &s.modalities {
            for &v in x {
                w.f64(v);
            }
        }
    }
    w.finish()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, FormatError> {
    let mut r = Reader::new(bytes, DATASET_MAGIC)?;
    let header = r.offset();
    let n = r.u32()? as usize;
    let m = r.u32()? as usize;
    let c = r.u32()? as usize;
    let d_in = r.u32()? as usize;
    if m == 0 || c == 0 || d_in == 0 {
        return Err(invalid(header, format!("zero dimension in header (M={m}, C={c}, d_in={d_in})")));
    }
    let per_sample = m
        .checked_mul(d_in)
        .and_then(|x| x.checked_mul(8))
        .and_then(|x| x.checked_add(4 + m))
        .ok_or_else(|| invalid(header, "header dimensions overflow"))?;
    r.require(n.saturating_mul(per_sample))?;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let at = r.offset();
        let label = r.u32()? as usize;
        if label >= c {
            return Err(invalid(at, format!("sample {i}: label {label} >= C={c}")));
        }
        let mut presence = Vec::with_capacity(m);
        for _ in 0..m {
            let at = r.offset();
            presence.push(match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(invalid(at, format!("sample {i}: presence byte {b}"))),
            });
        }
        let mut modalities = Vec::with_capacity(m);
        for &present in &presence {
            let at = r.offset();
            let x = (0..d_in).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            if !present && x.iter().any(|&v| v != 0.0) {
                return Err(invalid(at, format!("sample {i}: absent modality has non-zero features")));
            }
            modalities.push(x);
        }
        samples.push(ModalSample {
            modalities,
            presence,
            label,
        });
    }
    r.finish()?;
    Ok(Dataset {
        num_classes: c,
        num_modalities: m,
        d_in,
        samples,
    })
}

impl MissingMatrix {
    /// Bits are packed row-major, least significant bit first; 1 means present.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new(MISSING_MAGIC);
        w.u32(self.rows as u32);
        w.u32(self.cols as u32);
        let mut packed = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            packed[i / 8] |= 1 << (i % 8);
        }
        w.bytes(&packed);
        w.f64(self.p_m);
        w.f64(self.p_s);
        w.u64(self.seed);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes, MISSING_MAGIC)?;
        let header = r.offset();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let total = rows
            .checked_mul(cols)
            .ok_or_else(|| invalid(header, "mask dimensions overflow"))?;
        let at = r.offset();
        let packed = r.bytes(total.div_ceil(8))?;
        let bits: Vec<bool> = (0..total).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        if total % 8 != 0 && packed[total / 8] >> (total % 8) != 0 {
            return Err(invalid(at + total / 8, "non-zero padding bits"));
        }
        let at = r.offset();
        let p_m = r.f64()?;
        let p_s = r.f64()?;
        for p in [p_m, p_s] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(at, format!("probability {p} outside [0, 1]")));
            }
        }
        let seed = r.u64()?;
        r.finish()?;
        Ok(Self {
            rows,
            cols,
            bits,
            p_m,
            p_s,
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{apply_missing, make_missing_matrix, synth_generate, SynthSpec};

    fn data() -> Dataset {
        synth_generate(
            &SynthSpec {
                num_samples: 100,
                num_classes: 5,
                num_modalities: 12,
                d_in: 3,
                noise_std: 0.3,
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn dataset_round_trip() {
        let d = data();
        let bytes = encode_dataset(&d);
        assert_eq!(&bytes[..4], b"FMD1");
        assert_eq!(bytes.len(), 4 + 16 + 100 * (4 + 12 + 12 * 3 * 8));
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!((back.len(), back.num_modalities, back.num_classes), (100, 12, 5));
        assert_eq!(back, d);
    }

    #[test]
    fn masked_dataset_round_trip() {
        let d = data();
        let mm = make_missing_matrix(100, 12, 1.0, 0.5, 2).unwrap();
        let masked = apply_missing(&d, &mm).unwrap();
        let back = decode_dataset(&encode_dataset(&masked)).unwrap();
        assert_eq!(back.samples.iter().filter(|s| s.num_present() == 0).count(), 50);
    }

    #[test]
    fn dataset_errors_carry_offsets() {
        let bytes = encode_dataset(&data());
        assert!(matches!(
            decode_dataset(&bytes[..bytes.len() - 1]),
            Err(FormatError::Truncated { offset: 20, .. })
        ));
        let mut bad = bytes.clone();
        bad[20] = 9;
        assert!(matches!(decode_dataset(&bad), Err(FormatError::Invalid { offset: 20, .. })));
        let mut bad = bytes.clone();
        bad[24] = 2;
        assert!(matches!(decode_dataset(&bad), Err(FormatError::Invalid { offset: 24, .. })));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_dataset(&long), Err(FormatError::Trailing { .. })));
    }

    #[test]
    fn mask_round_trip_and_padding() {
        let mm = make_missing_matrix(7, 3, 0.34, 0.5, 8).unwrap();
        let bytes = mm.encode();
        assert_eq!(bytes.len(), 4 + 8 + 3 + 24);
        assert_eq!(MissingMatrix::decode(&bytes).unwrap(), mm);
        let mut bad = bytes.clone();
        bad[14] |= 0x80;
        assert!(matches!(MissingMatrix::decode(&bad), Err(FormatError::Invalid { offset: 14, .. })));
        assert!(matches!(MissingMatrix::decode(&bytes[..20]), Err(FormatError::Truncated { .. })));
    }
}
