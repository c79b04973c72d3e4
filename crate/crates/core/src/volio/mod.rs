//! Reading and writing NIfTI-1 volumes.
//!
//! Single-file (`.nii`, `.nii.gz`) and header/image pairs (`.hdr` + `.img`)
//! are read in either byte order; output is always single-file little-endian
//! NIfTI-1, gzip-compressed when the path ends in `.gz`.

mod header;
mod volume;

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::Matrix4;
use thiserror::Error;

pub use header::{Datatype, Endianness, NiftiHeader, HEADER_SIZE, SINGLE_FILE_VOX_OFFSET};
pub use volume::{Grid, Volume, VolumeKind};

#[derive(Debug, Error)]
pub enum VolioError {
    #[error("bad NIfTI magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("truncated file: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("label value {0} is not a representable non-negative integer")]
    LabelOutOfRange(f64),
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> VolioError + '_ {
    move |source| VolioError::Io { path: path.to_path_buf(), source }
}

/// Read a NIfTI-1 volume as an intensity volume.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume, VolioError> {
    read_volume_as(path, VolumeKind::Intensity)
}

/// Read a NIfTI-1 volume and tag it with `kind`. Label reads check that every
/// voxel holds a non-negative integer.
pub fn read_volume_as(path: impl AsRef<Path>, kind: VolumeKind) -> Result<Volume, VolioError> {
    let path = path.as_ref();
    let mut reader = open_maybe_gz(path)?;
    let mut hdr_buf = vec![0u8; HEADER_SIZE];
    read_full(&mut reader, &mut hdr_buf, path)?;
    let header = NiftiHeader::parse(&hdr_buf)?;
    let datatype = header.datatype()?;
    let dims = header.spatial_dims()?;
    let n_vox: usize = dims.iter().product();
    let n_bytes = n_vox * datatype.size_of();

    let mut raw = vec![0u8; n_bytes];
    if header.is_single_file() {
        let offset = (header.vox_offset.max(0.0) as usize).max(SINGLE_FILE_VOX_OFFSET);
        skip(&mut reader, offset - HEADER_SIZE, path)?;
        read_full(&mut reader, &mut raw, path)?;
    } else {
        drop(reader);
        let img = image_path_for(path);
        let mut img_reader = open_maybe_gz(&img)?;
        skip(&mut img_reader, header.vox_offset.max(0.0) as usize, &img)?;
        read_full(&mut img_reader, &mut raw, &img)?;
    }

    let mut values = decode(&raw, datatype, header.endianness);
    let slope = header.scl_slope as f64;
    let inter = header.scl_inter as f64;
    if slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0) {
        for v in values.iter_mut() {
            *v = *v * slope + inter;
        }
    }

    let data = fortran_to_row_major(&values, dims);
    let spacing = [0, 1, 2].map(|a| {
        let p = header.pixdim[a + 1].abs() as f64;
        if p > 0.0 {
            p
        } else {
            1.0
        }
    });
    let affine = header_affine(&header, spacing);
    Volume::new(data, Grid { dims, spacing, affine }, kind)
}

/// Write a volume as single-file NIfTI-1. Intensity volumes are stored as
/// float32; label volumes as uint8 when every label is below 256, else int16.
pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<(), VolioError> {
    let path = path.as_ref();
    let header = header_for(v)?;
    let datatype = header.datatype()?;
    let values = row_major_to_fortran(v.data(), v.dims());
    let mut body = Vec::with_capacity(SINGLE_FILE_VOX_OFFSET + values.len() * datatype.size_of());
    body.extend_from_slice(&header.to_bytes());
    body.extend_from_slice(&[0u8; SINGLE_FILE_VOX_OFFSET - HEADER_SIZE]);
    encode_into(&values, datatype, &mut body);

    let file = File::create(path).map_err(io_err(path))?;
    if is_gz(path) {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        enc.write_all(&body).map_err(io_err(path))?;
        enc.finish().and_then(|mut w| w.flush()).map_err(io_err(path))?;
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(&body).map_err(io_err(path))?;
        w.flush().map_err(io_err(path))?;
    }
    Ok(())
}

/// Build the header `write_volume` would emit for `v`.
pub fn header_for(v: &Volume) -> Result<NiftiHeader, VolioError> {
    let dims = v.dims();
    let mut h = NiftiHeader::default();
    for a in 0..3 {
        if dims[a] > i16::MAX as usize {
            return Err(VolioError::DimMismatch(format!("dimension {} exceeds NIfTI-1 limit", dims[a])));
        }
        h.dim[a + 1] = dims[a] as i16;
        h.pixdim[a + 1] = v.spacing()[a] as f32;
    }
    let datatype = match v.kind() {
        VolumeKind::Intensity => Datatype::Float32,
        VolumeKind::Label => {
            let (lo, hi) = v.min_max();
            if let Some(bad) = v.data().iter().find(|x| !(**x >= 0.0) || x.fract() != 0.0) {
                return Err(VolioError::LabelOutOfRange(*bad));
            }
            if lo < 0.0 || hi > i16::MAX as f64 {
                return Err(VolioError::LabelOutOfRange(hi));
            }
            if hi < 256.0 {
                Datatype::UInt8
            } else {
                Datatype::Int16
            }
        }
    };
    h.datatype = datatype.code();
    h.bitpix = (datatype.size_of() * 8) as i16;
    h.sform_code = 1;
    let m = v.affine();
    for row in 0..3 {
        for c in 0..4 {
            h.srow[row][c] = m[(row, c)] as f32;
        }
    }
    Ok(h)
}

/// Voxel-to-world affine following the NIfTI-1 precedence: sform, then
/// qform, then plain pixdim scaling.
pub fn header_affine(h: &NiftiHeader, spacing: [f64; 3]) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    if h.sform_code > 0 {
        for row in 0..3 {
            for c in 0..4 {
                m[(row, c)] = h.srow[row][c] as f64;
            }
        }
    } else if h.qform_code > 0 {
        let [b, c, d] = h.quatern.map(|q| q as f64);
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let r = [
            [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
            [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
            [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ];
        let qfac = if h.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let scale = [spacing[0], spacing[1], spacing[2] * qfac];
        for row in 0..3 {
            for col in 0..3 {
                m[(row, col)] = r[row][col] * scale[col];
            }
            m[(row, 3)] = h.qoffset[row] as f64;
        }
    } else {
        for a in 0..3 {
            m[(a, a)] = spacing[a];
        }
    }
    m
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>, VolioError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut buf = BufReader::new(file);
    let mut magic = [0u8; 2];
    let n = {
        use std::io::BufRead;
        let avail = buf.fill_buf().map_err(io_err(path))?;
        let n = avail.len().min(2);
        magic[..n].copy_from_slice(&avail[..n]);
        n
    };
    if n == 2 && magic == [0x1f, 0x8b] {
        Ok(Box::new(GzDecoder::new(buf)))
    } else {
        Ok(Box::new(buf))
    }
}

fn image_path_for(hdr: &Path) -> PathBuf {
    let s = hdr.to_string_lossy();
    if let Some(stem) = s.strip_suffix(".hdr.gz") {
        PathBuf::from(format!("{stem}.img.gz"))
    } else if let Some(stem) = s.strip_suffix(".hdr") {
        PathBuf::from(format!("{stem}.img"))
    } else {
        hdr.with_extension("img")
    }
}

fn read_full(r: &mut dyn Read, buf: &mut [u8], path: &Path) -> Result<(), VolioError> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(VolioError::TruncatedFile { expected: buf.len(), found: filled });
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(io_err(path)(e)),
        }
    }
    Ok(())
}

fn skip(r: &mut dyn Read, n: usize, path: &Path) -> Result<(), VolioError> {
    let copied = io::copy(&mut r.take(n as u64), &mut io::sink()).map_err(io_err(path))?;
    if copied < n as u64 {
        return Err(VolioError::TruncatedFile { expected: n, found: copied as usize });
    }
    Ok(())
}

fn decode(raw: &[u8], dt: Datatype, end: Endianness) -> Vec<f64> {
    macro_rules! conv {
        ($t:ty, $n:expr) => {
            raw.chunks_exact($n)
                .map(|c| {
                    let b: [u8; $n] = c.try_into().unwrap();
                    (match end {
                        Endianness::Little => <$t>::from_le_bytes(b),
                        Endianness::Big => <$t>::from_be_bytes(b),
                    }) as f64
                })
                .collect()
        };
    }
    match dt {
        Datatype::UInt8 => raw.iter().map(|&b| b as f64).collect(),
        Datatype::Int16 => conv!(i16, 2),
        Datatype::Int32 => conv!(i32, 4),
        Datatype::Float32 => conv!(f32, 4),
        Datatype::Float64 => conv!(f64, 8),
    }
}

fn encode_into(values: &[f64], dt: Datatype, out: &mut Vec<u8>) {
    match dt {
        Datatype::UInt8 => out.extend(values.iter().map(|&v| v as u8)),
        Datatype::Int16 => values.iter().for_each(|&v| out.extend_from_slice(&(v as i16).to_le_bytes())),
        Datatype::Int32 => values.iter().for_each(|&v| out.extend_from_slice(&(v as i32).to_le_bytes())),
        Datatype::Float32 => values.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Datatype::Float64 => values.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
}

// NIfTI stores the first axis fastest; volumes here keep the last axis fastest.
fn fortran_to_row_major(values: &[f64], dims: [usize; 3]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let mut out = vec![0.0; values.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                out[(x * ny + y) * nz + z] = values[x + nx * (y + ny * z)];
            }
        }
    }
    out
}

fn row_major_to_fortran(values: &[f64], dims: [usize; 3]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let mut out = vec![0.0; values.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                out[x + nx * (y + ny * z)] = values[(x * ny + y) * nz + z];
            }
        }
    }
    out
}
