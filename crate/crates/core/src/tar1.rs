//! "TAR1" tensor container: little-endian, magic `TAR1`, u32 rank,
//! rank x u32 dims, u8 dtype tag (0 = f32, 1 = i32, 2 = u8), raw payload.
//! Every tensor file in the repository uses this format.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TAR1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DtypeTag {
    F32 = 0,
    I32 = 1,
    U8 = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::I32(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn tag(&self) -> DtypeTag {
        match self {
            Payload::F32(_) => DtypeTag::F32,
            Payload::I32(_) => DtypeTag::I32,
            Payload::U8(_) => DtypeTag::U8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub dims: Vec<u32>,
    pub payload: Payload,
}

impl Archive {
    pub fn new(dims: Vec<u32>, payload: Payload) -> Result<Self> {
        let expect: u64 = dims.iter().map(|d| *d as u64).product();
        if expect != payload.len() as u64 {
            return Err(Error::Archive(format!(
                "dims {:?} imply {} elements, payload has {}",
                dims,
                expect,
                payload.len()
            )));
        }
        Ok(Self { dims, payload })
    }

    pub fn element_count(&self) -> usize {
        self.payload.len()
    }
}

pub fn write_to<W: Write>(w: &mut W, archive: &Archive) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(archive.dims.len() as u32).to_le_bytes())?;
    for d in &archive.dims {
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&[archive.payload.tag() as u8])?;
    match &archive.payload {
        Payload::F32(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Payload::I32(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Payload::U8(v) => w.write_all(v)?,
    }
    Ok(())
}

pub fn read_from<R: Read>(r: &mut R) -> Result<Archive> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Archive(format!(
            "bad magic {:02x?}, expected {:02x?}",
            magic, MAGIC
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    if rank > 16 {
        return Err(Error::Archive(format!("implausible rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut u32buf)?;
        dims.push(u32::from_le_bytes(u32buf));
    }
    let count: u64 = dims.iter().map(|d| *d as u64).product();
    let count = usize::try_from(count).map_err(|_| Error::Archive("tensor too large".into()))?;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let payload = match tag[0] {
        0 => {
            let mut v = vec![0f32; count];
            for x in &mut v {
                r.read_exact(&mut u32buf)?;
                *x = f32::from_le_bytes(u32buf);
            }
            Payload::F32(v)
        }
        1 => {
            let mut v = vec![0i32; count];
            for x in &mut v {
                r.read_exact(&mut u32buf)?;
                *x = i32::from_le_bytes(u32buf);
            }
            Payload::I32(v)
        }
        2 => {
            let mut v = vec![0u8; count];
            r.read_exact(&mut v)?;
            Payload::U8(v)
        }
        t => return Err(Error::Archive(format!("unknown dtype tag {t}"))),
    };
    Archive::new(dims, payload)
}

pub fn save(path: &Path, archive: &Archive) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_to(&mut f, archive)
}

pub fn load(path: &Path) -> Result<Archive> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_from(&mut f)
}

pub fn save_f32(path: &Path, dims: &[u32], data: Vec<f32>) -> Result<()> {
    save(path, &Archive::new(dims.to_vec(), Payload::F32(data))?)
}

pub fn save_i32(path: &Path, dims: &[u32], data: Vec<i32>) -> Result<()> {
    save(path, &Archive::new(dims.to_vec(), Payload::I32(data))?)
}

pub fn save_u8(path: &Path, dims: &[u32], data: Vec<u8>) -> Result<()> {
    save(path, &Archive::new(dims.to_vec(), Payload::U8(data))?)
}
