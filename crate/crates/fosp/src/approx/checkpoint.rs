//! Parameter checkpoint file: magic `FOSPCKPT`, version u16, then named
//! segments (length-prefixed UTF-8 name, shape, little-endian f64 payload).

use super::{LayoutBuilder, ParameterVector};
use crate::{FospError, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"FOSPCKPT";
pub const VERSION: u16 = 1;

/// One named array entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// A flat container of named f64 arrays; ordering is preserved so re-saving
/// an unmodified checkpoint is byte-identical.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        let name = name.into();
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "entry {name}");
        self.entries.push(Entry { name, shape, data });
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, value: f64) {
        self.push(name, vec![1], vec![value]);
    }

    pub fn push_vec(&mut self, name: impl Into<String>, data: Vec<f64>) {
        self.push(name, vec![data.len()], data);
    }

    /// Stores every segment of `pv` as `prefix/<segment name>`.
    pub fn push_pv(&mut self, prefix: &str, pv: &ParameterVector) {
        for (i, seg) in pv.segments().iter().enumerate() {
            self.push(
                format!("{prefix}/{}", seg.name),
                vec![seg.rows, seg.cols],
                pv.seg(i).iter().copied().collect(),
            );
        }
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let e = self
            .get(name)
            .ok_or_else(|| FospError::Checkpoint(format!("missing entry {name}")))?;
        if e.data.len() != 1 {
            return Err(FospError::Checkpoint(format!("entry {name} is not a scalar")));
        }
        Ok(e.data[0])
    }

    pub fn vec(&self, name: &str) -> Result<Vec<f64>> {
        let e = self
            .get(name)
            .ok_or_else(|| FospError::Checkpoint(format!("missing entry {name}")))?;
        Ok(e.data.clone())
    }

    /// Rebuilds a parameter vector with the layout of `template` from entries
    /// stored under `prefix`.
    pub fn take_pv(&self, prefix: &str, template: &ParameterVector) -> Result<ParameterVector> {
        let mut b = LayoutBuilder::new();
        for seg in template.segments() {
            b.add(seg.name.clone(), seg.rows, seg.cols);
        }
        let mut pv = b.build();
        for (i, seg) in template.segments().iter().enumerate() {
            let name = format!("{prefix}/{}", seg.name);
            let e = self
                .get(&name)
                .ok_or_else(|| FospError::Checkpoint(format!("missing segment {name}")))?;
            if e.shape != vec![seg.rows, seg.cols] {
                return Err(FospError::Checkpoint(format!(
                    "segment {name}: shape {:?} does not match layout {:?}",
                    e.shape,
                    (seg.rows, seg.cols)
                )));
            }
            let view =
                ndarray::ArrayView2::from_shape((seg.rows, seg.cols), &e.data).expect("entry view");
            pv.seg_mut(i).assign(&view);
        }
        Ok(pv)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(e.shape.len() as u8).to_le_bytes())?;
            for &d in &e.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in &e.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = Reader {
            inner: BufReader::new(File::open(path)?),
            offset: 0,
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(FospError::Format {
                offset: 0,
                detail: format!("bad magic {:?}, expected FOSPCKPT", String::from_utf8_lossy(&magic)),
            });
        }
        let version = r.read_u16()?;
        if version != VERSION {
            return Err(FospError::Format {
                offset: 8,
                detail: format!("unsupported checkpoint version {version}, expected {VERSION}"),
            });
        }
        let mut ckpt = Checkpoint::new();
        loop {
            let name_len = match r.try_read_u32()? {
                Some(v) => v as usize,
                None => break,
            };
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| FospError::Format {
                offset: r.offset,
                detail: "entry name is not UTF-8".into(),
            })?;
            let ndim = r.read_u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u32()? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(f64::from_le_bytes(r.read_array::<8>()?));
            }
            ckpt.entries.push(Entry { name, shape, data });
        }
        Ok(ckpt)
    }
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(FospError::Format {
                offset: self.offset,
                detail: "truncated file".into(),
            }),
            Err(e) => Err(e.into()),
        }
    }

    fn read_array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.read_exact(&mut buf)?;
        Ok(buf)
    }

    fn read_u8(&mut self) -> Result<u8> {
        Ok(self.read_array::<1>()?[0])
    }

    fn read_u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.read_array::<2>()?))
    }

    fn read_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.read_array::<4>()?))
    }

    /// Reads a u32 or returns None on clean EOF at an entry boundary.
    fn try_read_u32(&mut self) -> Result<Option<u32>> {
        let mut buf = [0u8; 4];
        let mut filled = 0;
        while filled < 4 {
            let n = self.inner.read(&mut buf[filled..]).map_err(FospError::from)?;
            if n == 0 {
                if filled == 0 {
                    return Ok(None);
                }
                return Err(FospError::Format {
                    offset: self.offset + filled as u64,
                    detail: "truncated file".into(),
                });
            }
            filled += n;
        }
        self.offset += 4;
        Ok(Some(u32::from_le_bytes(buf)))
    }
}
