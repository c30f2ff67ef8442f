//! Named parameter groups, deterministic initialization and checksums.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Mutex;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Top-level parameter groups; every parameter name starts with one of these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    Vae,
    Embedder,
    SketchEncoder,
    Unet,
    BgEncoder,
    BgInjection,
    StyleEncoder,
    StyleInjection,
    LoraSplitAttn,
}

impl Group {
    pub const ALL: [Group; 9] = [
        Group::Vae,
        Group::Embedder,
        Group::SketchEncoder,
        Group::Unet,
        Group::BgEncoder,
        Group::BgInjection,
        Group::StyleEncoder,
        Group::StyleInjection,
        Group::LoraSplitAttn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Vae => "vae",
            Group::Embedder => "embedder",
            Group::SketchEncoder => "sketch_encoder",
            Group::Unet => "unet",
            Group::BgEncoder => "bg_encoder",
            Group::BgInjection => "bg_injection",
            Group::StyleEncoder => "style_encoder",
            Group::StyleInjection => "style_injection",
            Group::LoraSplitAttn => "lora_split_attn",
        }
    }

    pub fn from_name(s: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.name() == s)
    }

    fn of_param(name: &str) -> Option<Group> {
        Group::from_name(name.split('.').next().unwrap_or(""))
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct GroupSet(u16);

impl GroupSet {
    pub const EMPTY: GroupSet = GroupSet(0);

    pub fn of(groups: &[Group]) -> GroupSet {
        groups.iter().fold(GroupSet(0), |s, g| s.with(*g))
    }

    pub fn with(self, g: Group) -> GroupSet {
        GroupSet(self.0 | (1 << g as u16))
    }

    pub fn contains(self, g: Group) -> bool {
        self.0 & (1 << g as u16) != 0
    }

    pub fn iter(self) -> impl Iterator<Item = Group> {
        Group::ALL.into_iter().filter(move |g| self.contains(*g))
    }

    pub fn complement(self) -> GroupSet {
        GroupSet::of(&Group::ALL.into_iter().filter(|g| !self.contains(*g)).collect::<Vec<_>>())
    }

    pub fn names(self) -> Vec<&'static str> {
        self.iter().map(Group::name).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
}

/// All model parameters, keyed by dotted name.
pub struct ParamStore {
    vars: Mutex<BTreeMap<String, Var>>,
    dtype: DType,
    device: Device,
    seed: u64,
}

impl fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.len())
            .field("dtype", &self.dtype)
            .field("seed", &self.seed)
            .finish()
    }
}

fn name_seed(seed: u64, name: &str) -> u64 {
    let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(name.as_bytes()).finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device, seed: u64) -> Self {
        Self { vars: Mutex::new(BTreeMap::new()), dtype, device, seed }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.vars.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Builder rooted at `group`; parameters of groups outside `trainable`
    /// are handed out detached from the autograd graph.
    pub fn builder(&self, group: Group, trainable: GroupSet) -> Builder<'_> {
        Builder { store: self, prefix: group.name().to_string(), trainable }
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.vars.lock().unwrap().get(name).map(|v| v.as_tensor().clone())
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.lock().unwrap().keys().cloned().collect()
    }

    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let vars = self.vars.lock().unwrap();
        let var = vars.get(name).ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn vars_in(&self, groups: GroupSet) -> Vec<Var> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .filter(|(k, _)| Group::of_param(k).is_some_and(|g| groups.contains(g)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    fn insert(&self, name: String, tensor: Tensor) -> Result<()> {
        // Detached first so the Var gets its own storage even when `tensor`
        // is already a variable of the right dtype.
        let var = Var::from_tensor(&tensor.to_dtype(self.dtype)?.to_device(&self.device)?.detach())?;
        self.vars.lock().unwrap().insert(name, var);
        Ok(())
    }

    /// SHA-256 over the names, shapes and little-endian bytes of a group.
    pub fn checksum(&self, group: Group) -> Result<String> {
        let vars = self.vars.lock().unwrap();
        let mut h = Sha256::new();
        for (name, var) in vars.iter().filter(|(k, _)| Group::of_param(k) == Some(group)) {
            h.update(name.as_bytes());
            h.update(format!("{:?}", var.dims()).as_bytes());
            let flat = var.as_tensor().flatten_all()?;
            match flat.dtype() {
                DType::F64 => flat.to_vec1::<f64>()?.iter().for_each(|v| h.update(v.to_le_bytes())),
                _ => flat.to_dtype(DType::F32)?.to_vec1::<f32>()?.iter().for_each(|v| h.update(v.to_le_bytes())),
            }
        }
        Ok(hex(&h.finalize()))
    }

    pub fn checksums(&self) -> Result<BTreeMap<Group, String>> {
        Group::ALL.into_iter().map(|g| Ok((g, self.checksum(g)?))).collect()
    }

    /// Copies every parameter under `src.` to the same suffix under `dst.`,
    /// replacing existing values.
    pub fn copy_prefix(&self, src: &str, dst: &str) -> Result<usize> {
        let src_dot = format!("{src}.");
        let pairs: Vec<(String, candle_core::Result<Tensor>)> = self
            .vars
            .lock()
            .unwrap()
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(&src_dot).map(|rest| (format!("{dst}.{rest}"), v.as_tensor().copy()))
            })
            .collect();
        let mut n = 0;
        for (name, t) in pairs {
            let t = t?;
            let existing = self.vars.lock().unwrap().get(&name).cloned();
            match existing {
                Some(var) if var.dims() == t.dims() => var.set(&t)?,
                Some(_) => return Err(Error::shape(format!("copy_prefix: shape mismatch for {name}"))),
                None => self.insert(name, t)?,
            }
            n += 1;
        }
        Ok(n)
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars.lock().unwrap().iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect()
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor>, dtype: DType, device: Device, seed: u64) -> Result<Self> {
        let store = ParamStore::new(dtype, device, seed);
        for (name, t) in tensors {
            if Group::of_param(&name).is_none() {
                return Err(Error::Checkpoint(format!("parameter `{name}` has no known group")));
            }
            store.insert(name, t)?;
        }
        Ok(store)
    }

    /// Deep copy with a different dtype (used for 64-bit gradient checks).
    pub fn to_dtype(&self, dtype: DType) -> Result<ParamStore> {
        let tensors = self
            .tensors()
            .into_iter()
            .map(|(k, t)| Ok((k, t.to_dtype(dtype)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        ParamStore::from_tensors(tensors, dtype, self.device.clone(), self.seed)
    }

    pub fn deep_clone(&self) -> Result<ParamStore> {
        self.to_dtype(self.dtype)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hierarchical accessor that fetches a parameter or creates it on first use.
#[derive(Clone)]
pub struct Builder<'a> {
    store: &'a ParamStore,
    prefix: String,
    trainable: GroupSet,
}

impl<'a> Builder<'a> {
    pub fn pp(&self, name: impl fmt::Display) -> Builder<'a> {
        Builder { store: self.store, prefix: format!("{}.{name}", self.prefix), trainable: self.trainable }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    pub fn get<S: Into<Shape>>(&self, name: &str, shape: S, init: Init) -> Result<Tensor> {
        let full = format!("{}.{name}", self.prefix);
        let shape: Shape = shape.into();
        let existing = self.store.vars.lock().unwrap().get(&full).cloned();
        let var = match existing {
            Some(v) => {
                if v.shape() != &shape {
                    return Err(Error::shape(format!("{full}: stored {:?}, requested {:?}", v.dims(), shape.dims())));
                }
                v
            }
            None => {
                let t = self.init_tensor(&full, &shape, init)?;
                self.store.insert(full.clone(), t)?;
                self.store.vars.lock().unwrap()[&full].clone()
            }
        };
        let group = Group::of_param(&full).expect("builder rooted at a group");
        Ok(if self.trainable.contains(group) { var.as_tensor().clone() } else { var.as_tensor().detach() })
    }

    fn init_tensor(&self, name: &str, shape: &Shape, init: Init) -> Result<Tensor> {
        let n = shape.elem_count();
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.store.seed, name));
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => {
                let d = Uniform::new_inclusive(-b, b).map_err(|e| Error::invalid(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            Init::Normal(s) => {
                let d = Normal::new(0.0, s).map_err(|e| Error::invalid(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
        };
        // Round through f32 so both precisions start from the same values.
        let data: Vec<f32> = data.into_iter().map(|v| v as f32).collect();
        Ok(Tensor::from_vec(data, shape.clone(), &self.store.device)?.to_dtype(self.store.dtype)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_order_independent() {
        let a = ParamStore::new(DType::F32, Device::Cpu, 3);
        let b = ParamStore::new(DType::F32, Device::Cpu, 3);
        let all = GroupSet::of(&Group::ALL);
        let ba = a.builder(Group::Unet, all);
        ba.get("x", (2, 3), Init::Normal(1.0)).unwrap();
        ba.get("y", 4, Init::Uniform(0.5)).unwrap();
        let bb = b.builder(Group::Unet, all);
        bb.get("y", 4, Init::Uniform(0.5)).unwrap();
        bb.get("x", (2, 3), Init::Normal(1.0)).unwrap();
        assert_eq!(a.checksum(Group::Unet).unwrap(), b.checksum(Group::Unet).unwrap());
    }

    #[test]
    fn frozen_params_are_detached() {
        let s = ParamStore::new(DType::F32, Device::Cpu, 0);
        let t = s.builder(Group::Vae, GroupSet::EMPTY).get("w", 3, Init::Ones).unwrap();
        let sum = t.sum_all().unwrap();
        let grads = sum.backward().unwrap();
        assert!(s.vars_in(GroupSet::of(&[Group::Vae])).iter().all(|v| grads.get(v.as_tensor()).is_none()));
    }

    #[test]
    fn deep_clone_owns_its_storage() {
        let a = ParamStore::new(DType::F32, Device::Cpu, 3);
        a.builder(Group::Vae, GroupSet::EMPTY).get("w", 3, Init::Normal(1.0)).unwrap();
        let before = a.checksums().unwrap();
        let b = a.deep_clone().unwrap();
        b.set("vae.w", &Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert_eq!(a.checksums().unwrap(), before);
        assert_ne!(b.checksums().unwrap(), before);
    }

    #[test]
    fn copy_prefix_is_bitwise() {
        let s = ParamStore::new(DType::F32, Device::Cpu, 0);
        let all = GroupSet::of(&Group::ALL);
        s.builder(Group::Unet, all).pp("encoder").get("w", (3, 3), Init::Normal(1.0)).unwrap();
        assert_eq!(s.copy_prefix("unet.encoder", "bg_encoder").unwrap(), 1);
        let a = s.get("unet.encoder.w").unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = s.get("bg_encoder.w").unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn group_set_ops() {
        let s = GroupSet::of(&[Group::Unet, Group::SketchEncoder]);
        assert!(s.contains(Group::Unet) && !s.contains(Group::Vae));
        assert_eq!(s.complement().iter().count(), 7);
        assert_eq!(s.names(), vec!["sketch_encoder", "unet"]);
    }
}
