//! PVUH: one point sequence per file.
//!
//! ```text
//! header (24 bytes)
//!   0  magic      "PVUH"
//!   4  version    u16 = 1
//!   6  flags      u16  bit0 labels, bit1 flow, bit2 vertex ids, bit3 joints
//!   8  L          u32  frames
//!  12  N          u32  points per frame
//!  16  D          u16  coordinates per point (3)
//!  18  J          u16  joints per frame (0 without joints)
//!  20  frame_rate f32
//! per frame
//!   coordinates   N*D f32
//!   labels        N   u8              (if flagged)
//!   flow          N*3 f32, NaN = none (if flagged)
//!   vertex ids    N   u32, !0 = none  (if flagged)
//!   joints        J*3 f32             (if flagged)
//! crc32 of all preceding bytes, u32
//! ```
//!
//! All values are little-endian. Coordinates are stored as `f32`.

use super::bytes::{check_crc, Reader, Writer};
use super::IoError;
use crate::geom::{FlowField, Point3, PointCloudFrame, PointSequence, SequenceMeta, NOISE_LABEL};

const FORMAT: &str = "PVUH";
const MAGIC: &[u8; 4] = b"PVUH";
const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;
const NO_VERTEX: u32 = u32::MAX;

/// Optional per-frame channels present in a container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ChannelFlags {
    pub labels: bool,
    pub flow: bool,
    pub vertex_ids: bool,
    pub joints: bool,
}

impl ChannelFlags {
    pub fn bits(self) -> u16 {
        u16::from(self.labels) | u16::from(self.flow) << 1 | u16::from(self.vertex_ids) << 2 | u16::from(self.joints) << 3
    }

    pub fn from_bits(bits: u16) -> Result<Self, IoError> {
        if bits & !0b1111 != 0 {
            return Err(IoError::UnknownFlags { format: FORMAT, flags: bits });
        }
        Ok(Self {
            labels: bits & 1 != 0,
            flow: bits & 2 != 0,
            vertex_ids: bits & 4 != 0,
            joints: bits & 8 != 0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PvuhHeader {
    pub flags: ChannelFlags,
    pub frames: u32,
    pub points: u32,
    pub dim: u16,
    pub joints: u16,
    pub frame_rate: f32,
}

impl PvuhHeader {
    fn frame_bytes(&self) -> Option<usize> {
        let n = self.points as usize;
        let mut b = n.checked_mul(self.dim as usize)?.checked_mul(4)?;
        if self.flags.labels {
            b = b.checked_add(n)?;
        }
        if self.flags.flow {
            b = b.checked_add(n.checked_mul(12)?)?;
        }
        if self.flags.vertex_ids {
            b = b.checked_add(n.checked_mul(4)?)?;
        }
        if self.flags.joints {
            b = b.checked_add(self.joints as usize * 12)?;
        }
        Some(b)
    }

    /// Exact file size implied by the header, `None` on overflow.
    pub fn byte_len(&self) -> Option<usize> {
        (self.frames as usize)
            .checked_mul(self.frame_bytes()?)?
            .checked_add(HEADER_LEN + 4)
    }

    /// Reads and checks the fixed header only.
    pub fn parse(data: &[u8]) -> Result<Self, IoError> {
        let mut r = Reader::new(FORMAT, data);
        r.magic(MAGIC)?;
        let version = r.u16()?;
        if version != VERSION {
            return Err(IoError::UnsupportedVersion { format: FORMAT, version });
        }
        let flags = ChannelFlags::from_bits(r.u16()?)?;
        let h = Self {
            flags,
            frames: r.u32()?,
            points: r.u32()?,
            dim: r.u16()?,
            joints: r.u16()?,
            frame_rate: r.f32()?,
        };
        if h.dim != 3 {
            return Err(IoError::Dimension(h.dim));
        }
        if h.flags.joints != (h.joints > 0) {
            return Err(IoError::FlagMismatch {
                format: FORMAT,
                reason: format!("joints flag {} with J = {}", h.flags.joints, h.joints),
            });
        }
        if !(h.frame_rate.is_finite() && h.frame_rate > 0.0) {
            return Err(r.malformed(format!("frame rate {}", h.frame_rate)));
        }
        Ok(h)
    }
}

/// Size in bytes of a container with the given shape and channels.
pub fn sequence_byte_len(frames: u32, points: u32, joints: u16, flags: ChannelFlags) -> Option<usize> {
    PvuhHeader {
        flags,
        frames,
        points,
        dim: 3,
        joints,
        frame_rate: 1.0,
    }
    .byte_len()
}

fn unencodable(msg: impl Into<String>) -> IoError {
    IoError::Unencodable(msg.into())
}

/// A channel is written when every frame has it; a channel present in only
/// some frames cannot be encoded.
fn channel(name: &str, present: impl Iterator<Item = bool>) -> Result<bool, IoError> {
    let v: Vec<bool> = present.collect();
    match (v.iter().all(|p| *p), v.iter().any(|p| *p)) {
        (true, _) => Ok(!v.is_empty()),
        (false, false) => Ok(false),
        _ => Err(unencodable(format!("{name} present in only some frames"))),
    }
}

/// Header describing `seq`, or why it cannot be stored.
pub fn header_for(seq: &PointSequence) -> Result<PvuhHeader, IoError> {
    let frames = u32::try_from(seq.len()).map_err(|_| unencodable("too many frames"))?;
    let n = seq.frames.first().map_or(0, |f| f.len());
    if seq.frames.iter().any(|f| f.len() != n) {
        return Err(unencodable("frames have different point counts"));
    }
    for f in &seq.frames {
        f.validate().map_err(|e| unencodable(e.to_string()))?;
    }
    let points = u32::try_from(n).map_err(|_| unencodable("too many points"))?;
    let mut flags = ChannelFlags {
        labels: channel("labels", seq.frames.iter().map(|f| f.part_labels.is_some()))?,
        flow: channel("flow", seq.frames.iter().map(|f| f.flow.is_some()))?,
        vertex_ids: channel("vertex ids", seq.frames.iter().map(|f| f.vertex_ids.is_some()))?,
        joints: false,
    };
    let mut joints = 0u16;
    if let Some(j) = &seq.meta.joints {
        if j.len() != seq.len() {
            return Err(unencodable(format!("{} joint frames for {} frames", j.len(), seq.len())));
        }
        let per = j.first().map_or(0, |f| f.len());
        if per == 0 || j.iter().any(|f| f.len() != per) {
            return Err(unencodable("joint frames must share one non-zero joint count"));
        }
        joints = u16::try_from(per).map_err(|_| unencodable("too many joints"))?;
        flags.joints = true;
    }
    if !(seq.meta.frame_rate.is_finite() && seq.meta.frame_rate > 0.0) {
        return Err(unencodable(format!("frame rate {}", seq.meta.frame_rate)));
    }
    Ok(PvuhHeader {
        flags,
        frames,
        points,
        dim: 3,
        joints,
        frame_rate: seq.meta.frame_rate,
    })
}

fn point(w: &mut Writer, p: Point3) {
    w.f32(p.x as f32);
    w.f32(p.y as f32);
    w.f32(p.z as f32);
}

/// Serializes a sequence. Actor and class ids are not part of the format;
/// the dataset manifest carries them.
pub fn encode_sequence(seq: &PointSequence) -> Result<Vec<u8>, IoError> {
    let h = header_for(seq)?;
    let mut w = Writer::with_capacity(h.byte_len().unwrap_or(0));
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.u16(h.flags.bits());
    w.u32(h.frames);
    w.u32(h.points);
    w.u16(h.dim);
    w.u16(h.joints);
    w.f32(h.frame_rate);
    for (t, f) in seq.frames.iter().enumerate() {
        for p in &f.points {
            point(&mut w, *p);
        }
        if let Some(l) = &f.part_labels {
            w.bytes(l);
        }
        if let Some(fl) = &f.flow {
            for (v, ok) in fl.vectors.iter().zip(&fl.valid) {
                match ok {
                    true => point(&mut w, *v),
                    false => (0..3).for_each(|_| w.f32(f32::NAN)),
                }
            }
        }
        if let Some(ids) = &f.vertex_ids {
            for id in ids {
                match id {
                    Some(NO_VERTEX) => return Err(unencodable("vertex id 0xFFFFFFFF is reserved")),
                    Some(v) => w.u32(*v),
                    None => w.u32(NO_VERTEX),
                }
            }
        }
        if let Some(j) = &seq.meta.joints {
            for p in &j[t] {
                point(&mut w, *p);
            }
        }
    }
    Ok(w.finish())
}

fn read_point(r: &mut Reader) -> Result<Point3, IoError> {
    Ok(Point3::new(r.f32()? as f64, r.f32()? as f64, r.f32()? as f64))
}

/// Parses a container, checking its length against the header before the
/// checksum so a short file reports truncation.
pub fn decode_sequence(data: &[u8]) -> Result<PointSequence, IoError> {
    let h = PvuhHeader::parse(data)?;
    let expected = h.byte_len().unwrap_or(usize::MAX);
    if data.len() < expected {
        return Err(IoError::Truncated {
            format: FORMAT,
            expected,
            got: data.len(),
        });
    }
    if data.len() > expected {
        return Err(IoError::TrailingBytes {
            format: FORMAT,
            extra: data.len() - expected,
        });
    }
    let body = check_crc(FORMAT, data)?;
    let mut r = Reader::new(FORMAT, &body[HEADER_LEN..]);
    let n = h.points as usize;
    let mut frames = Vec::with_capacity(h.frames as usize);
    let mut joints = h.flags.joints.then(Vec::new);
    for _ in 0..h.frames {
        let points = (0..n).map(|_| read_point(&mut r)).collect::<Result<Vec<_>, _>>()?;
        let mut f = PointCloudFrame::new(points);
        if h.flags.labels {
            let l = r.take(n)?.to_vec();
            if let Some(bad) = l.iter().find(|l| **l > NOISE_LABEL) {
                return Err(r.malformed(format!("part label {bad}")));
            }
            f.part_labels = Some(l);
        }
        if h.flags.flow {
            let mut fl = FlowField::all_invalid(n);
            for i in 0..n {
                let v = read_point(&mut r)?;
                match (v.x.is_nan(), v.y.is_nan(), v.z.is_nan()) {
                    (true, true, true) => {}
                    (false, false, false) if v.x.is_finite() && v.y.is_finite() && v.z.is_finite() => {
                        fl.vectors[i] = v;
                        fl.valid[i] = true;
                    }
                    _ => return Err(r.malformed(format!("flow vector {i} is partly invalid"))),
                }
            }
            f.flow = Some(fl);
        }
        if h.flags.vertex_ids {
            let ids = (0..n)
                .map(|_| r.u32().map(|v| (v != NO_VERTEX).then_some(v)))
                .collect::<Result<Vec<_>, _>>()?;
            f.vertex_ids = Some(ids);
        }
        if let Some(j) = joints.as_mut() {
            let frame = (0..h.joints).map(|_| read_point(&mut r)).collect::<Result<Vec<_>, _>>()?;
            j.push(frame);
        }
        frames.push(f);
    }
    Ok(PointSequence::new(
        frames,
        SequenceMeta {
            frame_rate: h.frame_rate,
            joints,
            ..SequenceMeta::default()
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PointSequence {
        let frame = |k: f64| {
            let mut f = PointCloudFrame::new(vec![Point3::new(k, 0.5, -1.25), Point3::new(0.125, k, 2.0)]);
            f.part_labels = Some(vec![3, NOISE_LABEL]);
            let mut fl = FlowField::from_vectors(vec![Point3::new(0.0625, 0.0, 0.0), Point3::ZERO]);
            fl.valid[1] = false;
            f.flow = Some(fl);
            f.vertex_ids = Some(vec![Some(7), None]);
            f
        };
        PointSequence::new(
            vec![frame(0.0), frame(1.0), frame(2.0)],
            SequenceMeta {
                frame_rate: 10.0,
                joints: Some(vec![vec![Point3::new(0.0, 0.0, 1.0)]; 3]),
                ..SequenceMeta::default()
            },
        )
    }

    #[test]
    fn size_arithmetic_for_labels_and_flow() {
        let flags = ChannelFlags {
            labels: true,
            flow: true,
            ..ChannelFlags::default()
        };
        let payload = 30 * (384 * 3 * 4 + 384 + 384 * 3 * 4);
        assert_eq!(sequence_byte_len(30, 384, 0, flags), Some(payload + HEADER_LEN + 4));
    }

    #[test]
    fn round_trip_keeps_every_channel() {
        let seq = tiny();
        let bytes = encode_sequence(&seq).unwrap();
        let h = PvuhHeader::parse(&bytes).unwrap();
        assert_eq!(bytes.len(), h.byte_len().unwrap());
        assert_eq!(h.flags.bits(), 0b1111);
        let back = decode_sequence(&bytes).unwrap();
        // Every value above is exactly representable in f32.
        assert_eq!(back, seq);
    }

    #[test]
    fn distinct_errors() {
        let bytes = encode_sequence(&tiny()).unwrap();
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(matches!(decode_sequence(&b), Err(IoError::BadMagic { .. })));
        let mut b = bytes.clone();
        b[4] = 2;
        assert!(matches!(decode_sequence(&b), Err(IoError::UnsupportedVersion { version: 2, .. })));
        let mut b = bytes.clone();
        b[7] = 0x80;
        assert!(matches!(decode_sequence(&b), Err(IoError::UnknownFlags { .. })));
        let mut b = bytes.clone();
        b[16] = 2;
        assert_eq!(decode_sequence(&b), Err(IoError::Dimension(2)));
        let mut b = bytes.clone();
        b[18] = 0;
        assert!(matches!(decode_sequence(&b), Err(IoError::FlagMismatch { .. })));
        assert!(matches!(
            decode_sequence(&bytes[..bytes.len() - 1]),
            Err(IoError::Truncated { .. })
        ));
        let mut b = bytes.clone();
        b.push(0);
        assert!(matches!(decode_sequence(&b), Err(IoError::TrailingBytes { extra: 1, .. })));
        let mut b = bytes.clone();
        b[HEADER_LEN + 1] ^= 1;
        assert!(matches!(decode_sequence(&b), Err(IoError::Checksum { .. })));
    }

    #[test]
    fn partial_channels_are_rejected() {
        let mut seq = tiny();
        seq.frames[1].flow = None;
        assert!(matches!(encode_sequence(&seq), Err(IoError::Unencodable(_))));
        let mut seq = tiny();
        seq.frames[0].points.pop();
        assert!(encode_sequence(&seq).is_err());
    }
}
