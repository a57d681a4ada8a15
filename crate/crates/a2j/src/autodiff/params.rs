//! Named parameter store and the checkpoint format: a UTF-8 manifest
//! (name, shape, byte offset) next to a little-endian f32 blob. Round-trips
//! are bit-exact.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{A2jError, Result};

const MANIFEST_HEADER: &str = "a2j-checkpoint v1";

#[derive(Clone, Debug)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    /// Updated by the optimizer.
    pub trainable: bool,
    /// Weight decay applies (off for norm gains/biases).
    pub decay: bool,
}

impl Param {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Param { shape, data, trainable: true, decay: true }
    }

    pub fn no_decay(mut self) -> Self {
        self.decay = false;
        self
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self.decay = false;
        self
    }
}

/// Ordered collection of named parameters. Iteration order is insertion
/// order, which keeps checkpoints and optimizer traversals deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    order: Vec<String>,
    map: HashMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, param: Param) {
        assert!(!self.map.contains_key(name), "duplicate parameter {name}");
        self.order.push(name.to_string());
        self.map.insert(name.to_string(), param);
    }

    pub fn get(&self, name: &str) -> &Param {
        self.map.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        self.map.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.order.iter().map(move |n| (n.as_str(), &self.map[n]))
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(|p| p.data.len()).sum()
    }

    /// Writes `manifest.txt` and `params.bin` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        manifest.push_str(&format!("{MANIFEST_HEADER} {}\n", self.order.len()));
        let mut blob: Vec<u8> = Vec::with_capacity(self.num_values() * 4);
        for (name, p) in self.iter() {
            let dims: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("{name}\t{}\t{}\n", dims.join(","), blob.len()));
            for v in &p.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(dir.join("manifest.txt"), manifest)?;
        let mut f = fs::File::create(dir.join("params.bin"))?;
        f.write_all(&blob)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`ParamStore::save`]. Trainability
    /// flags are not part of the format; callers that need them should
    /// rebuild the store from the model config and use
    /// [`ParamStore::load_values`].
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
        let mut blob = Vec::new();
        fs::File::open(dir.join("params.bin"))?.read_to_end(&mut blob)?;
        let mut lines = manifest.lines();
        let header = lines
            .next()
            .ok_or_else(|| A2jError::Corrupt("empty checkpoint manifest".into()))?;
        let count: usize = header
            .strip_prefix(MANIFEST_HEADER)
            .and_then(|rest| rest.trim().parse().ok())
            .ok_or_else(|| {
                A2jError::Corrupt(format!("unsupported checkpoint header: {header}"))
            })?;
        let mut store = ParamStore::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (name, dims, offset) = match (parts.next(), parts.next(), parts.next()) {
                (Some(n), Some(d), Some(o)) => (n, d, o),
                _ => return Err(A2jError::Corrupt(format!("bad manifest line: {line}"))),
            };
            let shape: Vec<usize> = if dims.is_empty() {
                vec![]
            } else {
                dims.split(',')
                    .map(|d| {
                        d.parse()
                            .map_err(|_| A2jError::Corrupt(format!("bad shape in line: {line}")))
                    })
                    .collect::<Result<_>>()?
            };
            let offset: usize = offset
                .parse()
                .map_err(|_| A2jError::Corrupt(format!("bad offset in line: {line}")))?;
            let n: usize = shape.iter().product();
            let end = offset + n * 4;
            if end > blob.len() {
                return Err(A2jError::Corrupt(format!(
                    "blob truncated: {name} needs bytes {offset}..{end}, blob has {}",
                    blob.len()
                )));
            }
            let data: Vec<f32> = blob[offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            store.insert(name, Param::new(shape, data));
        }
        if store.order.len() != count {
            return Err(A2jError::Corrupt(format!(
                "manifest declares {count} tensors, found {}",
                store.order.len()
            )));
        }
        Ok(store)
    }

    /// Copies values from a checkpoint into an existing store; names and
    /// shapes must match exactly.
    pub fn load_values(&mut self, dir: &Path) -> Result<()> {
        let loaded = Self::load(dir)?;
        if loaded.order != self.order {
            return Err(A2jError::Corrupt(
                "checkpoint parameter names do not match the model".into(),
            ));
        }
        for name in &self.order {
            let src = &loaded.map[name];
            let dst = self.map.get_mut(name).expect("name present");
            if src.shape != dst.shape {
                return Err(A2jError::Corrupt(format!(
                    "checkpoint shape mismatch for {name}: {:?} vs {:?}",
                    src.shape, dst.shape
                )));
            }
            dst.data.clone_from(&src.data);
        }
        Ok(())
    }
}
