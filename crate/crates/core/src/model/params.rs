use super::config::ModelConfig;
use crate::numerics::Tensor;
use crate::rng;

const INIT_STD: f64 = 0.02;

/// Named tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    fn register(&mut self, name: String, tensor: Tensor) -> usize {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Order-sensitive FNV-1a over names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in self.iter() {
            feed(name.as_bytes());
            for &d in t.shape() {
                feed(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockIds {
    pub ln1_gamma: usize,
    pub ln1_beta: usize,
    pub qkv: usize,
    pub proj: usize,
    pub ln2_gamma: usize,
    pub ln2_beta: usize,
    pub fc1_weight: usize,
    pub fc1_bias: usize,
    pub fc2_weight: usize,
    pub fc2_bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmIds {
    pub w_ih: usize,
    pub w_hh: usize,
    pub b_ih: usize,
    pub b_hh: usize,
}

/// Store indices of every named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub pos_embedding: usize,
    pub class_token: usize,
    pub encoder: Vec<BlockIds>,
    pub lstm: LstmIds,
    /// Latent head, three (weight, bias) pairs.
    pub head: [(usize, usize); 3],
    pub expand_weight: usize,
    pub expand_bias: usize,
    pub decoder: Vec<BlockIds>,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: rng::Stream,
}

impl Init<'_> {
    fn normal(&mut self, name: String, shape: &[usize]) -> usize {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng::truncated_normal(&mut self.rng, INIT_STD)).collect();
        self.store.register(name, Tensor::new(shape, data).expect("valid shape"))
    }

    fn fill(&mut self, name: String, shape: &[usize], value: f64) -> usize {
        self.store.register(name, Tensor::filled(shape, value))
    }

    fn block(&mut self, prefix: &str, cfg: &ModelConfig) -> BlockIds {
        let (d, f) = (cfg.patch_len(), cfg.ffn_hidden());
        BlockIds {
            ln1_gamma: self.fill(format!("{prefix}.ln1.gamma"), &[d], 1.0),
            ln1_beta: self.fill(format!("{prefix}.ln1.beta"), &[d], 0.0),
            qkv: self.normal(format!("{prefix}.attn.qkv"), &[d, 3 * cfg.heads * cfg.head_dim()]),
            proj: self.normal(format!("{prefix}.attn.proj"), &[cfg.heads * cfg.head_dim(), d]),
            ln2_gamma: self.fill(format!("{prefix}.ln2.gamma"), &[d], 1.0),
            ln2_beta: self.fill(format!("{prefix}.ln2.beta"), &[d], 0.0),
            fc1_weight: self.normal(format!("{prefix}.mlp.fc1.weight"), &[d, f]),
            fc1_bias: self.fill(format!("{prefix}.mlp.fc1.bias"), &[f], 0.0),
            fc2_weight: self.normal(format!("{prefix}.mlp.fc2.weight"), &[f, d]),
            fc2_bias: self.fill(format!("{prefix}.mlp.fc2.bias"), &[d], 0.0),
        }
    }
}

/// Builds freshly initialised parameters and their layout. Registration
/// order is fixed and defines checkpoint order.
pub fn initialise(cfg: &ModelConfig, seed: u64) -> (ParamStore, Layout) {
    let mut store = ParamStore::default();
    let mut init = Init {
        store: &mut store,
        rng: rng::substream(seed, &[0x1417]),
    };
    let (n, d, h, l) = (cfg.tokens(), cfg.patch_len(), cfg.lstm_hidden, cfg.latent_dim);

    let pos_embedding = init.normal("pos_embedding".into(), &[n + 1, d]);
    let class_token = init.fill("class_token".into(), &[1, d], 0.0);
    let encoder = (0..cfg.depth_enc).map(|q| init.block(&format!("encoder.{q}"), cfg)).collect();

    let w_ih = init.normal("lstm.w_ih".into(), &[d, 4 * h]);
    let w_hh = init.normal("lstm.w_hh".into(), &[h, 4 * h]);
    // gate order i, f, g, o; forget gate starts open
    let mut forget_open = vec![0.0; 4 * h];
    forget_open[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
    let b_ih = init
        .store
        .register("lstm.b_ih".into(), Tensor::vector(forget_open).expect("non-empty"));
    let b_hh = init.fill("lstm.b_hh".into(), &[4 * h], 0.0);
    let lstm = LstmIds { w_ih, w_hh, b_ih, b_hh };

    let head = [(h, l), (l, l), (l, l)]
        .iter()
        .enumerate()
        .map(|(i, &(fan_in, fan_out))| {
            let w = init.normal(format!("latent_head.fc{}.weight", i + 1), &[fan_in, fan_out]);
            let b = init.fill(format!("latent_head.fc{}.bias", i + 1), &[fan_out], 0.0);
            (w, b)
        })
        .collect::<Vec<_>>();

    let expand_weight = init.normal("decoder.expand.weight".into(), &[l, n * d]);
    let expand_bias = init.fill("decoder.expand.bias".into(), &[n * d], 0.0);
    let decoder = (0..cfg.depth_dec).map(|q| init.block(&format!("decoder.{q}"), cfg)).collect();

    let layout = Layout {
        pos_embedding,
        class_token,
        encoder,
        lstm,
        head: [head[0], head[1], head[2]],
        expand_weight,
        expand_bias,
        decoder,
    };
    (store, layout)
}

/// Rebuilds a store from named tensors, checking them against the layout a
/// fresh initialisation of `cfg` would produce.
pub fn assemble(cfg: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<(ParamStore, Layout), String> {
    let (reference, layout) = initialise(cfg, 0);
    if named.len() != reference.len() {
        return Err(format!("expected {} tensors, found {}", reference.len(), named.len()));
    }
    let mut store = ParamStore::default();
    for ((name, tensor), (ref_name, ref_t)) in named.into_iter().zip(reference.iter()) {
        if name != ref_name {
            return Err(format!("expected tensor `{ref_name}`, found `{name}`"));
        }
        if tensor.shape() != ref_t.shape() {
            return Err(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                tensor.shape(),
                ref_t.shape()
            ));
        }
        store.register(name, tensor);
    }
    Ok((store, layout))
}
