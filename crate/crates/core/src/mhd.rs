//! MetaImage (.mhd header + raw payload) reader and writer.
//!
//! Supported header keys: `NDims`, `DimSize`, `ElementType` (MET_SHORT,
//! MET_USHORT, MET_FLOAT), `ElementSpacing`, `ElementByteOrderMSB`,
//! `ElementDataFile`. Unknown keys are ignored; byte order is honored
//! exactly. `DimSize = X Y Z` maps to width, height, depth with X varying
//! fastest in the raw payload.

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use ndarray::{Array2, Array3};
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Raw payload element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    Short,
    UShort,
    Float,
}

impl ElementType {
    pub fn met_name(self) -> &'static str {
        match self {
            ElementType::Short => "MET_SHORT",
            ElementType::UShort => "MET_USHORT",
            ElementType::Float => "MET_FLOAT",
        }
    }

    pub fn byte_size(self) -> usize {
        match self {
            ElementType::Short | ElementType::UShort => 2,
            ElementType::Float => 4,
        }
    }

    fn parse(name: &str) -> Option<Self> {
        match name {
            "MET_SHORT" => Some(ElementType::Short),
            "MET_USHORT" => Some(ElementType::UShort),
            "MET_FLOAT" => Some(ElementType::Float),
            _ => None,
        }
    }
}

struct Header {
    dims: [usize; 3], // X (cols), Y (rows), Z (slices)
    spacing: [f32; 3], // X, Y, Z
    elem: ElementType,
    msb: bool,
    data_file: String,
    header_len: usize, // offset of LOCAL payload, if any
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn parse_header(path: &Path, text: &str) -> Result<Header> {
    let mut keys: HashMap<String, String> = HashMap::new();
    let mut consumed = 0usize;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let (k, v) = trimmed
                .split_once('=')
                .ok_or_else(|| format_err(path, format!("malformed header line: {trimmed:?}")))?;
            keys.insert(k.trim().to_string(), v.trim().to_string());
            if k.trim() == "ElementDataFile" {
                consumed += line.len();
                break; // payload follows in LOCAL mode
            }
        }
        consumed += line.len();
    }

    let require = |k: &str| -> Result<String> {
        keys.get(k)
            .cloned()
            .ok_or_else(|| format_err(path, format!("missing required key {k}")))
    };

    let ndims: usize = require("NDims")?
        .parse()
        .map_err(|_| format_err(path, "NDims is not an integer"))?;
    if ndims != 3 {
        return Err(format_err(path, format!("NDims must be 3, got {ndims}")));
    }
    if let Some(v) = keys.get("CompressedData") {
        if v.eq_ignore_ascii_case("true") {
            return Err(format_err(path, "compressed payloads are not supported"));
        }
    }

    let dim_size = require("DimSize")?;
    let dims: Vec<usize> = dim_size
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| ()))
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| format_err(path, format!("bad DimSize {dim_size:?}")))?;
    if dims.len() != 3 || dims.contains(&0) {
        return Err(format_err(
            path,
            format!("DimSize must hold 3 positive integers, got {dim_size:?}"),
        ));
    }

    let elem = ElementType::parse(&require("ElementType")?)
        .ok_or_else(|| format_err(path, "unsupported ElementType"))?;

    let spacing = match keys.get("ElementSpacing") {
        None => [1.0, 1.0, 1.0],
        Some(s) => {
            let parts: Vec<f32> = s
                .split_whitespace()
                .map(|t| t.parse::<f32>().map_err(|_| ()))
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| format_err(path, format!("bad ElementSpacing {s:?}")))?;
            if parts.len() != 3 || parts.iter().any(|&v| v <= 0.0) {
                return Err(format_err(
                    path,
                    format!("ElementSpacing must hold 3 positive floats, got {s:?}"),
                ));
            }
            [parts[0], parts[1], parts[2]]
        }
    };

    // ElementByteOrderMSB is the canonical key; BinaryDataByteOrderMSB is a
    // legacy synonym emitted by some tools (PROMISE12 headers among them).
    let msb_text = keys
        .get("ElementByteOrderMSB")
        .or_else(|| keys.get("BinaryDataByteOrderMSB"))
        .map(String::as_str)
        .unwrap_or("False");
    let msb = match msb_text.to_ascii_lowercase().as_str() {
        "true" => true,
        "false" => false,
        other => return Err(format_err(path, format!("bad byte-order flag {other:?}"))),
    };

    let data_file = require("ElementDataFile")?;
    if data_file == "LIST" {
        return Err(format_err(path, "ElementDataFile = LIST is not supported"));
    }

    Ok(Header {
        dims: [dims[0], dims[1], dims[2]],
        spacing,
        elem,
        msb,
        data_file,
        header_len: consumed,
    })
}

fn decode_payload(raw: &[u8], elem: ElementType, msb: bool) -> Vec<f32> {
    let n = raw.len() / elem.byte_size();
    let mut out = Vec::with_capacity(n);
    match (elem, msb) {
        (ElementType::Float, false) => {
            for ch in raw.chunks_exact(4) {
                out.push(LittleEndian::read_f32(ch));
            }
        }
        (ElementType::Float, true) => {
            for ch in raw.chunks_exact(4) {
                out.push(BigEndian::read_f32(ch));
            }
        }
        (ElementType::Short, false) => {
            for ch in raw.chunks_exact(2) {
                out.push(LittleEndian::read_i16(ch) as f32);
            }
        }
        (ElementType::Short, true) => {
            for ch in raw.chunks_exact(2) {
                out.push(BigEndian::read_i16(ch) as f32);
            }
        }
        (ElementType::UShort, false) => {
            for ch in raw.chunks_exact(2) {
                out.push(LittleEndian::read_u16(ch) as f32);
            }
        }
        (ElementType::UShort, true) => {
            for ch in raw.chunks_exact(2) {
                out.push(BigEndian::read_u16(ch) as f32);
            }
        }
    }
    out
}

fn encode_payload(values: impl Iterator<Item = f32>, elem: ElementType, msb: bool) -> Vec<u8> {
    let mut out = Vec::new();
    let mut buf4 = [0u8; 4];
    let mut buf2 = [0u8; 2];
    for v in values {
        match (elem, msb) {
            (ElementType::Float, false) => {
                LittleEndian::write_f32(&mut buf4, v);
                out.extend_from_slice(&buf4);
            }
            (ElementType::Float, true) => {
                BigEndian::write_f32(&mut buf4, v);
                out.extend_from_slice(&buf4);
            }
            (ElementType::Short, false) => {
                LittleEndian::write_i16(&mut buf2, v as i16);
                out.extend_from_slice(&buf2);
            }
            (ElementType::Short, true) => {
                BigEndian::write_i16(&mut buf2, v as i16);
                out.extend_from_slice(&buf2);
            }
            (ElementType::UShort, false) => {
                LittleEndian::write_u16(&mut buf2, v as u16);
                out.extend_from_slice(&buf2);
            }
            (ElementType::UShort, true) => {
                BigEndian::write_u16(&mut buf2, v as u16);
                out.extend_from_slice(&buf2);
            }
        }
    }
    out
}

fn read_raw(header_path: &Path, header_text: &str, h: &Header) -> Result<Vec<u8>> {
    let expected = h.dims[0] * h.dims[1] * h.dims[2] * h.elem.byte_size();
    let raw = if h.data_file == "LOCAL" {
        let bytes = fs::read(header_path)?;
        bytes[h.header_len.min(bytes.len())..].to_vec()
    } else {
        let dir = header_path.parent().unwrap_or_else(|| Path::new("."));
        fs::read(dir.join(&h.data_file))?
    };
    if raw.len() != expected {
        return Err(Error::Truncated {
            path: header_path.to_path_buf(),
            expected,
            found: raw.len(),
        });
    }
    let _ = header_text;
    Ok(raw)
}

/// Reads a MetaImage volume; voxels are converted to f32 and spacing taken
/// from `ElementSpacing`.
pub fn read_metaimage(header_path: &Path) -> Result<Volume> {
    let (dims, spacing, data) = read_metaimage_array(header_path)?;
    let id = header_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "volume".to_string());
    // dims = (W, H, N); voxel layout in the raw file is x-fastest, which is
    // exactly row-major [slice][row][col].
    let voxels = Array3::from_shape_vec((dims[2], dims[1], dims[0]), data)
        .map_err(|e| format_err(header_path, format!("shape mismatch: {e}")))?;
    Volume::new(id, voxels, [spacing[1], spacing[0], spacing[2]])
}

fn read_metaimage_array(header_path: &Path) -> Result<([usize; 3], [f32; 3], Vec<f32>)> {
    let text = fs::read_to_string(header_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::InvalidData {
            format_err(header_path, "header is not valid UTF-8 text")
        } else {
            Error::Io(e)
        }
    })?;
    let h = parse_header(header_path, &text)?;
    let raw = read_raw(header_path, &text, &h)?;
    let data = decode_payload(&raw, h.elem, h.msb);
    Ok((h.dims, h.spacing, data))
}

fn write_pair(
    header_path: &Path,
    dims: [usize; 3],
    spacing: [f32; 3],
    elem: ElementType,
    msb: bool,
    payload: Vec<u8>,
) -> Result<PathBuf> {
    let stem = header_path
        .file_stem()
        .ok_or_else(|| format_err(header_path, "header path has no file stem"))?
        .to_string_lossy()
        .into_owned();
    let raw_name = format!("{stem}.raw");
    let header = format!(
        "ObjectType = Image\n\
         NDims = 3\n\
         BinaryData = True\n\
         DimSize = {} {} {}\n\
         ElementType = {}\n\
         ElementSpacing = {} {} {}\n\
         ElementByteOrderMSB = {}\n\
         ElementDataFile = {}\n",
        dims[0],
        dims[1],
        dims[2],
        elem.met_name(),
        spacing[0],
        spacing[1],
        spacing[2],
        if msb { "True" } else { "False" },
        raw_name
    );
    if let Some(dir) = header_path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(header_path, header)?;
    let raw_path = header_path.with_file_name(raw_name);
    fs::write(&raw_path, payload)?;
    Ok(raw_path)
}

/// Writes a volume as a .mhd/.raw pair next to `header_path`.
pub fn write_metaimage(
    v: &Volume,
    header_path: &Path,
    elem: ElementType,
    msb: bool,
) -> Result<()> {
    let (n, h, w) = v.voxels.dim();
    let payload = encode_payload(v.voxels.iter().copied(), elem, msb);
    write_pair(
        header_path,
        [w, h, n],
        [v.spacing[1], v.spacing[0], v.spacing[2]],
        elem,
        msb,
        payload,
    )?;
    Ok(())
}

/// Writes a binary 3D mask as MET_USHORT.
pub fn write_mask3(mask: &Array3<u8>, spacing: [f32; 3], header_path: &Path) -> Result<()> {
    let (n, h, w) = mask.dim();
    let payload = encode_payload(mask.iter().map(|&v| v as f32), ElementType::UShort, false);
    write_pair(
        header_path,
        [w, h, n],
        [spacing[1], spacing[0], spacing[2]],
        ElementType::UShort,
        false,
        payload,
    )?;
    Ok(())
}

/// Reads a binary 3D mask; any nonzero voxel counts as foreground.
pub fn read_mask3(header_path: &Path) -> Result<Array3<u8>> {
    let (dims, _spacing, data) = read_metaimage_array(header_path)?;
    let flat: Vec<u8> = data.iter().map(|&v| u8::from(v != 0.0)).collect();
    Array3::from_shape_vec((dims[2], dims[1], dims[0]), flat)
        .map_err(|e| format_err(header_path, format!("shape mismatch: {e}")))
}

/// Writes a single binary slice mask as a depth-1 MetaImage.
pub fn write_mask2(mask: &Array2<u8>, header_path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let payload = encode_payload(mask.iter().map(|&v| v as f32), ElementType::UShort, false);
    write_pair(
        header_path,
        [w, h, 1],
        [1.0, 1.0, 1.0],
        ElementType::UShort,
        false,
        payload,
    )?;
    Ok(())
}

/// Reads a depth-1 MetaImage back into a 2D binary mask.
pub fn read_mask2(header_path: &Path) -> Result<Array2<u8>> {
    let m3 = read_mask3(header_path)?;
    let (n, h, w) = m3.dim();
    if n != 1 {
        return Err(format_err(
            header_path,
            format!("expected a single-slice mask, found {n} slices"),
        ));
    }
    let flat: Vec<u8> = m3.into_iter().collect();
    Array2::from_shape_vec((h, w), flat)
        .map_err(|e| format_err(header_path, format!("shape mismatch: {e}")))
}

/// Exports a deformation field as a 2-channel float MetaImage: slice 0 holds
/// the row displacements, slice 1 the column displacements.
pub fn write_field(field: &ndarray::Array3<f32>, header_path: &Path) -> Result<()> {
    let (h, w, ch) = field.dim();
    if ch != 2 {
        return Err(Error::Dimension(format!(
            "deformation field must have 2 channels, got {ch}"
        )));
    }
    let mut stacked = Vec::with_capacity(2 * h * w);
    for k in 0..2 {
        for r in 0..h {
            for c in 0..w {
                stacked.push(field[[r, c, k]]);
            }
        }
    }
    let payload = encode_payload(stacked.into_iter(), ElementType::Float, false);
    write_pair(
        header_path,
        [w, h, 2],
        [1.0, 1.0, 1.0],
        ElementType::Float,
        false,
        payload,
    )?;
    Ok(())
}

/// Reads a deformation field written by [`write_field`].
pub fn read_field(header_path: &Path) -> Result<ndarray::Array3<f32>> {
    let (dims, _spacing, data) = read_metaimage_array(header_path)?;
    let (w, h, n) = (dims[0], dims[1], dims[2]);
    if n != 2 {
        return Err(format_err(
            header_path,
            format!("deformation field file must hold 2 planes, found {n}"),
        ));
    }
    let mut field = ndarray::Array3::zeros((h, w, 2));
    for k in 0..2 {
        for r in 0..h {
            for c in 0..w {
                field[[r, c, k]] = data[(k * h + r) * w + c];
            }
        }
    }
    Ok(field)
}
