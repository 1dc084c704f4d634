//! `GCKP` checkpoint container: a JSON manifest describing the model
//! followed by named `GCT1` tensor records.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use gridcast_tensor::{read_tensor, write_tensor, Scalar};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::prednet::{Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: ModelConfig,
    pub names: Vec<String>,
    pub scalars: usize,
    /// Free-form run information (seed, epoch, loss, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub manifest: Manifest,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: ModelConfig, params: ParamStore<T>, meta: serde_json::Value) -> Self {
        Checkpoint {
            manifest: Manifest {
                model,
                names: params.names().to_vec(),
                scalars: params.num_scalars(),
                meta,
            },
            params,
        }
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(manifest.len() as u64).to_le_bytes())?;
        out.write_all(&manifest)?;
        out.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, value) in self.params.names().iter().zip(self.params.values()) {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            write_tensor(out, value)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mut b4 = [0u8; 4];
        input.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut b8 = [0u8; 8];
        input.read_exact(&mut b8)?;
        let len = u64::from_le_bytes(b8) as usize;
        let mut manifest = vec![0u8; len];
        input.read_exact(&mut manifest)?;
        let manifest: Manifest = serde_json::from_slice(&manifest)?;
        input.read_exact(&mut b4)?;
        let count = u32::from_le_bytes(b4) as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            input.read_exact(&mut b4)?;
            let mut name = vec![0u8; u32::from_le_bytes(b4) as usize];
            input.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            if params.id(&name).is_some() {
                return Err(Error::Format(format!("duplicate parameter {name}")));
            }
            params.insert(name, read_tensor(input)?);
        }
        if params.names() != manifest.names.as_slice() {
            return Err(Error::Format("tensor records disagree with the manifest".into()));
        }
        Ok(Checkpoint { manifest, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Rebuilds the model and checks every stored tensor against it.
    pub fn restore(&self) -> Result<(Model, ParamStore<T>)> {
        let (model, fresh) = Model::build::<T>(&self.manifest.model, 0)?;
        if fresh.names() != self.params.names() {
            return Err(Error::Format("checkpoint parameters do not match the model layout".into()));
        }
        for (id, name) in fresh.ids().zip(fresh.names()) {
            let (want, got) = (fresh.get(id).shape(), self.params.get(id).shape());
            if want != got {
                return Err(Error::Format(format!("{name}: stored shape {got:?}, model expects {want:?}")));
            }
        }
        Ok((model, self.params.clone()))
    }
}
