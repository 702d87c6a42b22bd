//! On-disk formats: NPY v1.0 arrays (little-endian, C-order, `<f8` / `|u1`)
//! and checkpoint archives (zip of per-tensor NPY entries + a JSON manifest).

use std::fs::File;
use std::io::{Read, Seek, Write};
use std::path::Path;

use zip::write::FileOptions;

use crate::nets::{Param, ParamSet};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("zip error: {0}")]
    Zip(#[from] zip::result::ZipError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, IoError>;

/// The two dtypes this crate persists.
#[derive(Clone, Debug, PartialEq)]
pub enum NpyArray {
    F64 { shape: Vec<usize>, data: Vec<f64> },
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl NpyArray {
    pub fn shape(&self) -> &[usize] {
        match self {
            NpyArray::F64 { shape, .. } | NpyArray::U8 { shape, .. } => shape,
        }
    }

    pub fn as_f64(&self) -> Result<(&[usize], &[f64])> {
        match self {
            NpyArray::F64 { shape, data } => Ok((shape, data)),
            NpyArray::U8 { .. } => Err(IoError::Format("expected <f8 array, found |u1".into())),
        }
    }

    pub fn as_u8(&self) -> Result<(&[usize], &[u8])> {
        match self {
            NpyArray::U8 { shape, data } => Ok((shape, data)),
            NpyArray::F64 { .. } => Err(IoError::Format("expected |u1 array, found <f8".into())),
        }
    }
}

fn shape_tuple(shape: &[usize]) -> String {
    // numpy header syntax: 1-tuples keep a trailing comma
    match shape.len() {
        0 => "()".into(),
        1 => format!("({},)", shape[0]),
        _ => format!(
            "({})",
            shape.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(", ")
        ),
    }
}

pub fn write_npy<W: Write>(w: &mut W, array: &NpyArray) -> Result<()> {
    let (descr, shape) = match array {
        NpyArray::F64 { shape, .. } => ("<f8", shape),
        NpyArray::U8 { shape, .. } => ("|u1", shape),
    };
    let header = format!(
        "{{'descr': '{descr}', 'fortran_order': False, 'shape': {}, }}",
        shape_tuple(shape)
    );
    // pad so that magic(6) + version(2) + hlen(2) + header is a multiple of 64
    let unpadded = 10 + header.len() + 1;
    let padding = (64 - unpadded % 64) % 64;
    let header = format!("{header}{}\n", " ".repeat(padding));

    w.write_all(b"\x93NUMPY\x01\x00")?;
    w.write_all(&(header.len() as u16).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    match array {
        NpyArray::F64 { data, .. } => {
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        NpyArray::U8 { data, .. } => w.write_all(data)?,
    }
    Ok(())
}

fn header_field<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let tag = format!("'{key}':");
    let start = header
        .find(&tag)
        .ok_or_else(|| IoError::Format(format!("npy header missing {key}")))?
        + tag.len();
    Ok(header[start..].trim_start())
}

pub fn read_npy<R: Read>(r: &mut R) -> Result<NpyArray> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic[..6] != b"\x93NUMPY" {
        return Err(IoError::Format("not an npy file".into()));
    }
    if magic[6] != 1 || magic[7] != 0 {
        return Err(IoError::Format(format!(
            "unsupported npy version {}.{}",
            magic[6], magic[7]
        )));
    }
    let mut hlen = [0u8; 2];
    r.read_exact(&mut hlen)?;
    let mut header = vec![0u8; u16::from_le_bytes(hlen) as usize];
    r.read_exact(&mut header)?;
    let header = std::str::from_utf8(&header)
        .map_err(|_| IoError::Format("npy header is not utf-8".into()))?;

    let descr = header_field(header, "descr")?;
    let descr = descr
        .strip_prefix('\'')
        .and_then(|s| s.split('\'').next())
        .ok_or_else(|| IoError::Format("malformed descr".into()))?;
    let order = header_field(header, "fortran_order")?;
    if !order.starts_with("False") {
        return Err(IoError::Format("fortran-order arrays are not supported".into()));
    }
    let shape_src = header_field(header, "shape")?;
    let inner = shape_src
        .strip_prefix('(')
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| IoError::Format("malformed shape".into()))?;
    let shape: Vec<usize> = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| IoError::Format(format!("bad shape entry {s:?}")))
        })
        .collect::<Result<_>>()?;
    let numel: usize = shape.iter().product();

    match descr {
        "<f8" => {
            let mut raw = vec![0u8; numel * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(NpyArray::F64 { shape, data })
        }
        "|u1" => {
            let mut data = vec![0u8; numel];
            r.read_exact(&mut data)?;
            Ok(NpyArray::U8 { shape, data })
        }
        other => Err(IoError::Format(format!("unsupported dtype {other:?}"))),
    }
}

pub fn save_npy(path: &Path, array: &NpyArray) -> Result<()> {
    let mut file = std::io::BufWriter::new(File::create(path)?);
    write_npy(&mut file, array)?;
    file.flush()?;
    Ok(())
}

pub fn load_npy(path: &Path) -> Result<NpyArray> {
    read_npy(&mut std::io::BufReader::new(File::open(path)?))
}

/// A parameter archive plus its JSON hyperparameter manifest.
pub struct Checkpoint {
    pub manifest: serde_json::Value,
    pub params: ParamSet,
}

/// Zip layout: `manifest.json` + `params/<name>.npy`, stored uncompressed
/// so identical inputs produce identical archives.
pub fn save_checkpoint(
    path: &Path,
    manifest: &serde_json::Value,
    params: &ParamSet,
) -> Result<()> {
    let file = File::create(path)?;
    let mut zip = zip::ZipWriter::new(file);
    let options: FileOptions =
        FileOptions::default().compression_method(zip::CompressionMethod::Stored);

    zip.start_file("manifest.json", options)?;
    serde_json::to_writer_pretty(&mut zip, manifest)?;
    for param in params.iter() {
        zip.start_file(format!("params/{}.npy", param.name), options)?;
        write_npy(
            &mut zip,
            &NpyArray::F64 { shape: param.shape.clone(), data: param.data.clone() },
        )?;
    }
    zip.finish()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path)?;
    load_checkpoint_from(file)
}

pub fn load_checkpoint_from<R: Read + Seek>(reader: R) -> Result<Checkpoint> {
    let mut zip = zip::ZipArchive::new(reader)?;
    let manifest: serde_json::Value = serde_json::from_reader(zip.by_name("manifest.json")?)?;

    // preserve archive order: parameter order is meaningful
    let mut params = ParamSet::new();
    for i in 0..zip.len() {
        let mut entry = zip.by_index(i)?;
        let entry_name = entry.name().to_string();
        let Some(stem) = entry_name
            .strip_prefix("params/")
            .and_then(|n| n.strip_suffix(".npy"))
        else {
            continue;
        };
        let array = read_npy(&mut entry)?;
        let (shape, data) = array.as_f64()?;
        params.push(Param {
            name: stem.to_string(),
            shape: shape.to_vec(),
            data: data.to_vec(),
        });
    }
    if params.is_empty() {
        return Err(IoError::Format("checkpoint holds no parameter tensors".into()));
    }
    Ok(Checkpoint { manifest, params })
}
