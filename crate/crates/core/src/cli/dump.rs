//! Fixed-width little-endian grid dumps and PGM export.
//!
//! Layout: 4-byte magic, version byte, then H, W, C as `u32` LE, then the
//! payload in row-major order with the class/channel axis fastest.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Image, LabelMap, ProbMap, Region, RegionMap};

pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DumpKind {
    Prob,
    Label,
    Region,
    Image,
}

impl DumpKind {
    pub fn magic(self) -> &'static [u8; 4] {
        match self {
            DumpKind::Prob => b"PMAP",
            DumpKind::Label => b"LMAP",
            DumpKind::Region => b"QMAP",
            DumpKind::Image => b"IMG0",
        }
    }

    fn element_size(self) -> usize {
        match self {
            DumpKind::Prob | DumpKind::Image => 4,
            DumpKind::Label => 2,
            DumpKind::Region => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DumpHeader {
    pub kind: DumpKind,
    pub version: u8,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

fn encode(kind: DumpKind, h: usize, w: usize, c: usize, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(kind.magic());
    out.push(VERSION);
    for v in [h, w, c] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(payload);
    out
}

/// Parses and checks the header; returns it with the payload slice.
pub fn decode(expected: DumpKind, bytes: &[u8]) -> Result<(DumpHeader, &[u8])> {
    let name = String::from_utf8_lossy(expected.magic()).into_owned();
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("{name}: file shorter than header")));
    }
    if &bytes[..4] != expected.magic() {
        return Err(Error::Format(format!("expected magic {name}, found {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    let version = bytes[4];
    if version != VERSION {
        return Err(Error::Format(format!("{name}: unsupported version {version}")));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
    let header = DumpHeader { kind: expected, version, height: field(0), width: field(1), channels: field(2) };
    let want = header
        .height
        .checked_mul(header.width)
        .and_then(|n| n.checked_mul(header.channels))
        .and_then(|n| n.checked_mul(expected.element_size()))
        .ok_or_else(|| Error::Format(format!("{name}: dimensions overflow")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != want {
        return Err(Error::Format(format!("{name}: payload has {} bytes, header implies {want}", payload.len())));
    }
    Ok((header, payload))
}

fn f32_payload(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

fn f32_values(payload: &[u8]) -> Vec<f64> {
    payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect()
}

pub fn encode_pmap(p: &ProbMap) -> Vec<u8> {
    encode(DumpKind::Prob, p.height(), p.width(), p.num_classes(), &f32_payload(p.data()))
}

/// Values pass through `f32`, so the simplex check of the reloaded map uses
/// the usual tolerance.
pub fn decode_pmap(bytes: &[u8]) -> Result<ProbMap> {
    let (h, payload) = decode(DumpKind::Prob, bytes)?;
    ProbMap::new(h.height, h.width, h.channels, f32_values(payload))
}

pub fn encode_image(img: &Image) -> Vec<u8> {
    encode(DumpKind::Image, img.height(), img.width(), img.channels(), &f32_payload(img.data()))
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let (h, payload) = decode(DumpKind::Image, bytes)?;
    Image::new(h.height, h.width, h.channels, f32_values(payload))
}

pub fn encode_lmap(y: &LabelMap) -> Vec<u8> {
    let payload: Vec<u8> = y.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    encode(DumpKind::Label, y.height(), y.width(), 1, &payload)
}

pub fn decode_lmap(bytes: &[u8]) -> Result<LabelMap> {
    let (h, payload) = decode(DumpKind::Label, bytes)?;
    if h.channels != 1 {
        return Err(Error::Format(format!("LMAP must have C = 1, found {}", h.channels)));
    }
    let data = payload.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
    LabelMap::new(h.height, h.width, data)
}

pub fn encode_qmap(r: &RegionMap) -> Vec<u8> {
    let payload: Vec<u8> = r.data().iter().map(|&q| q.index() as u8).collect();
    encode(DumpKind::Region, r.height(), r.width(), 1, &payload)
}

pub fn decode_qmap(bytes: &[u8]) -> Result<RegionMap> {
    let (h, payload) = decode(DumpKind::Region, bytes)?;
    if h.channels != 1 {
        return Err(Error::Format(format!("QMAP must have C = 1, found {}", h.channels)));
    }
    let data = payload
        .iter()
        .map(|&b| Region::from_code(b).ok_or_else(|| Error::Format(format!("QMAP: invalid region code {b}"))))
        .collect::<Result<Vec<_>>>()?;
    RegionMap::new(h.height, h.width, data)
}

pub fn gray_level(r: Region) -> u8 {
    match r {
        Region::UC => 255,
        Region::US => 170,
        Region::DC => 85,
        Region::DS => 0,
    }
}

/// Binary (P5) PGM, one byte per pixel.
pub fn encode_pgm(r: &RegionMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", r.width(), r.height()).into_bytes();
    out.extend(r.data().iter().map(|&q| gray_level(q)));
    out
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}
