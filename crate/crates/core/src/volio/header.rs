//! NIfTI-1 header: the fixed 348-byte layout, both byte orders on read,
//! little-endian on write.

use super::VolioError;

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag; where single-file data starts.
pub const SINGLE_FILE_VOX_OFFSET: usize = 352;

pub const MAGIC_SINGLE: [u8; 4] = *b"n+1\0";
pub const MAGIC_PAIR: [u8; 4] = *b"ni1\0";

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QUATERN_B: usize = 256;
    pub const QOFFSET_X: usize = 268;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

/// On-disk voxel types this crate understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(i16)]
pub enum Datatype {
    UInt8 = 2,
    Int16 = 4,
    Int32 = 8,
    Float32 = 16,
    Float64 = 64,
}

impl Datatype {
    pub fn from_code(code: i16) -> Result<Self, VolioError> {
        Ok(match code {
            2 => Datatype::UInt8,
            4 => Datatype::Int16,
            8 => Datatype::Int32,
            16 => Datatype::Float32,
            64 => Datatype::Float64,
            other => return Err(VolioError::UnsupportedDatatype(other)),
        })
    }

    pub fn code(self) -> i16 {
        self as i16
    }

    pub fn size_of(self) -> usize {
        match self {
            Datatype::UInt8 => 1,
            Datatype::Int16 => 2,
            Datatype::Int32 | Datatype::Float32 => 4,
            Datatype::Float64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endianness {
    Little,
    Big,
}

/// The subset of NIfTI-1 header fields that affect how voxels are decoded
/// and placed in space. Everything else is ignored on read and zeroed on write.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub descrip: [u8; 80],
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub magic: [u8; 4],
    pub endianness: Endianness,
}

impl Default for NiftiHeader {
    fn default() -> Self {
        NiftiHeader {
            dim: [3, 1, 1, 1, 1, 1, 1, 1],
            datatype: Datatype::Float32.code(),
            bitpix: 32,
            pixdim: [1.0; 8],
            vox_offset: SINGLE_FILE_VOX_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            xyzt_units: 2,
            descrip: [0; 80],
            qform_code: 0,
            sform_code: 0,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow: [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
            magic: MAGIC_SINGLE,
            endianness: Endianness::Little,
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    end: Endianness,
}

impl Reader<'_> {
    fn bytes<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.buf[at..at + N]);
        b
    }
    fn i16(&self, at: usize) -> i16 {
        match self.end {
            Endianness::Little => i16::from_le_bytes(self.bytes(at)),
            Endianness::Big => i16::from_be_bytes(self.bytes(at)),
        }
    }
    fn f32(&self, at: usize) -> f32 {
        match self.end {
            Endianness::Little => f32::from_le_bytes(self.bytes(at)),
            Endianness::Big => f32::from_be_bytes(self.bytes(at)),
        }
    }
}

impl NiftiHeader {
    /// Parse a 348-byte header, detecting byte order from `sizeof_hdr`.
    pub fn parse(buf: &[u8]) -> Result<Self, VolioError> {
        if buf.len() < HEADER_SIZE {
            return Err(VolioError::TruncatedFile { expected: HEADER_SIZE, found: buf.len() });
        }
        let raw = [buf[0], buf[1], buf[2], buf[3]];
        let end = if i32::from_le_bytes(raw) == HEADER_SIZE as i32 {
            Endianness::Little
        } else if i32::from_be_bytes(raw) == HEADER_SIZE as i32 {
            Endianness::Big
        } else {
            return Err(VolioError::BadHeader(format!(
                "sizeof_hdr is {} (expected 348 in either byte order)",
                i32::from_le_bytes(raw)
            )));
        };
        let r = Reader { buf, end };
        let magic: [u8; 4] = r.bytes(offsets::MAGIC);
        if magic != MAGIC_SINGLE && magic != MAGIC_PAIR {
            return Err(VolioError::BadMagic(magic));
        }
        let mut dim = [0i16; 8];
        let mut pixdim = [0f32; 8];
        for n in 0..8 {
            dim[n] = r.i16(offsets::DIM + 2 * n);
            pixdim[n] = r.f32(offsets::PIXDIM + 4 * n);
        }
        let mut srow = [[0f32; 4]; 3];
        for (row, out) in srow.iter_mut().enumerate() {
            for (c, v) in out.iter_mut().enumerate() {
                *v = r.f32(offsets::SROW_X + 16 * row + 4 * c);
            }
        }
        let quatern = [0, 1, 2].map(|n| r.f32(offsets::QUATERN_B + 4 * n));
        let qoffset = [0, 1, 2].map(|n| r.f32(offsets::QOFFSET_X + 4 * n));
        Ok(NiftiHeader {
            dim,
            datatype: r.i16(offsets::DATATYPE),
            bitpix: r.i16(offsets::BITPIX),
            pixdim,
            vox_offset: r.f32(offsets::VOX_OFFSET),
            scl_slope: r.f32(offsets::SCL_SLOPE),
            scl_inter: r.f32(offsets::SCL_INTER),
            xyzt_units: buf[offsets::XYZT_UNITS],
            descrip: r.bytes(offsets::DESCRIP),
            qform_code: r.i16(offsets::QFORM_CODE),
            sform_code: r.i16(offsets::SFORM_CODE),
            quatern,
            qoffset,
            srow,
            magic,
            endianness: end,
        })
    }

    /// Little-endian 348-byte encoding.
    pub fn to_bytes(&self) -> [u8; HEADER_SIZE] {
        let mut b = [0u8; HEADER_SIZE];
        let mut put = |at: usize, bytes: &[u8]| b[at..at + bytes.len()].copy_from_slice(bytes);
        put(offsets::SIZEOF_HDR, &(HEADER_SIZE as i32).to_le_bytes());
        for n in 0..8 {
            put(offsets::DIM + 2 * n, &self.dim[n].to_le_bytes());
            put(offsets::PIXDIM + 4 * n, &self.pixdim[n].to_le_bytes());
        }
        put(offsets::DATATYPE, &self.datatype.to_le_bytes());
        put(offsets::BITPIX, &self.bitpix.to_le_bytes());
        put(offsets::VOX_OFFSET, &self.vox_offset.to_le_bytes());
        put(offsets::SCL_SLOPE, &self.scl_slope.to_le_bytes());
        put(offsets::SCL_INTER, &self.scl_inter.to_le_bytes());
        put(offsets::XYZT_UNITS, &[self.xyzt_units]);
        put(offsets::DESCRIP, &self.descrip);
        put(offsets::QFORM_CODE, &self.qform_code.to_le_bytes());
        put(offsets::SFORM_CODE, &self.sform_code.to_le_bytes());
        for n in 0..3 {
            put(offsets::QUATERN_B + 4 * n, &self.quatern[n].to_le_bytes());
            put(offsets::QOFFSET_X + 4 * n, &self.qoffset[n].to_le_bytes());
        }
        for row in 0..3 {
            for c in 0..4 {
                put(offsets::SROW_X + 16 * row + 4 * c, &self.srow[row][c].to_le_bytes());
            }
        }
        put(offsets::MAGIC, &self.magic);
        b
    }

    pub fn datatype(&self) -> Result<Datatype, VolioError> {
        Datatype::from_code(self.datatype)
    }

    /// Spatial dims after squeezing singleton trailing dimensions.
    pub fn spatial_dims(&self) -> Result<[usize; 3], VolioError> {
        let ndim = self.dim[0];
        if !(1..=7).contains(&ndim) {
            return Err(VolioError::BadHeader(format!("dim[0] = {ndim}")));
        }
        let ndim = ndim as usize;
        if let Some(n) = (4..=ndim).find(|&n| self.dim[n] != 1) {
            return Err(VolioError::DimMismatch(format!(
                "dim[{n}] = {} but only 3D volumes are supported",
                self.dim[n]
            )));
        }
        let mut out = [1usize; 3];
        for (a, o) in out.iter_mut().enumerate().take(ndim.min(3)) {
            let d = self.dim[a + 1];
            if d < 1 {
                return Err(VolioError::BadHeader(format!("dim[{}] = {d}", a + 1)));
            }
            *o = d as usize;
        }
        Ok(out)
    }

    pub fn is_single_file(&self) -> bool {
        self.magic == MAGIC_SINGLE
    }
}
