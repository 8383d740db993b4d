//! Self-describing binary container for checkpoints and logit dumps.
//!
//! Layout: 4-byte magic, u32 version, u32 JSON header length, header bytes,
//! then named f64 tensors (`u32 name_len, name, u64 rows, u64 cols, data LE`).
//! The header is free-form JSON owned by each caller.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

pub struct TensorFileWriter {
    out: BufWriter<File>,
}

impl TensorFileWriter {
    pub fn create(path: &Path, magic: &[u8; 4], header_json: &str) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(magic)?;
        out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        out.write_u32::<LittleEndian>(header_json.len() as u32)?;
        out.write_all(header_json.as_bytes())?;
        Ok(Self { out })
    }

    pub fn write_tensor(&mut self, name: &str, tensor: &Array2<f64>) -> Result<()> {
        self.out.write_u32::<LittleEndian>(name.len() as u32)?;
        self.out.write_all(name.as_bytes())?;
        self.out.write_u64::<LittleEndian>(tensor.nrows() as u64)?;
        self.out.write_u64::<LittleEndian>(tensor.ncols() as u64)?;
        for &v in tensor.iter() {
            self.out.write_f64::<LittleEndian>(v)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub struct TensorFile {
    pub header_json: String,
    pub tensors: Vec<(String, Array2<f64>)>,
}

impl TensorFile {
    pub fn read(path: &Path, magic: &[u8; 4]) -> Result<Self> {
        let mut input = BufReader::new(File::open(path)?);
        let mut got_magic = [0u8; 4];
        input.read_exact(&mut got_magic)?;
        if &got_magic != magic {
            return Err(Error::Checkpoint(format!(
                "{}: bad magic {:?}, expected {:?}",
                path.display(),
                got_magic,
                magic
            )));
        }
        let version = input.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let header_len = input.read_u32::<LittleEndian>()? as usize;
        let mut header = vec![0u8; header_len];
        input.read_exact(&mut header)?;
        let header_json = String::from_utf8(header)
            .map_err(|e| Error::Checkpoint(format!("header not utf-8: {e}")))?;

        let mut tensors = Vec::new();
        loop {
            let name_len = match input.read_u32::<LittleEndian>() {
                Ok(n) => n as usize,
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            };
            let mut name = vec![0u8; name_len];
            input.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| Error::Checkpoint(format!("tensor name not utf-8: {e}")))?;
            let rows = input.read_u64::<LittleEndian>()? as usize;
            let cols = input.read_u64::<LittleEndian>()? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(input.read_f64::<LittleEndian>()?);
            }
            let arr = Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            tensors.push((name, arr));
        }
        Ok(Self {
            header_json,
            tensors,
        })
    }

    pub fn take(&mut self, name: &str) -> Result<Array2<f64>> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))?;
        Ok(self.tensors.remove(pos).1)
    }
}
