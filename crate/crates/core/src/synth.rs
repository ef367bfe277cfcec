//! Synthetic graph generators used for fixtures, tests and benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::graph::{DType, DimDoc, Graph, GraphDoc};

/// Incremental graph builder that names one output tensor per node.
pub struct Builder {
    pub doc: GraphDoc,
    tensors: usize,
}

impl Default for Builder {
    fn default() -> Self {
        Self::new()
    }
}

impl Builder {
    pub fn new() -> Self {
        Builder {
            doc: GraphDoc::default(),
            tensors: 0,
        }
    }

    pub fn input(&mut self, name: &str, dtype: DType, dims: Vec<DimDoc>) -> String {
        self.doc.tensor_dims(name, dtype, dims);
        self.doc.inputs.push(name.into());
        name.into()
    }

    pub fn constant(&mut self, name: &str, dtype: DType, shape: &[u64]) -> String {
        self.doc.tensor(name, dtype, shape).constant = true;
        name.into()
    }

    fn fresh(&mut self) -> String {
        let t = format!("t{}", self.tensors);
        self.tensors += 1;
        t
    }

    /// Adds a node with one inferred output and returns that tensor's name.
    pub fn op(&mut self, name: &str, op: &str, inputs: &[&str], acc: bool, attrs: Value) -> String {
        let out = self.fresh();
        self.doc.tensor_unshaped(&out, DType::F32);
        self.push(name, op, inputs, &[&out], acc, attrs);
        out
    }

    /// Adds a node whose outputs carry declared shapes.
    pub fn op_declared(
        &mut self,
        name: &str,
        op: &str,
        inputs: &[&str],
        acc: bool,
        attrs: Value,
        shapes: &[Vec<DimDoc>],
    ) -> Vec<String> {
        let outs: Vec<String> = shapes
            .iter()
            .map(|s| {
                let t = self.fresh();
                self.doc.tensor_dims(&t, DType::F32, s.clone());
                t
            })
            .collect();
        let refs: Vec<&str> = outs.iter().map(String::as_str).collect();
        self.push(name, op, inputs, &refs, acc, attrs);
        outs
    }

    fn push(
        &mut self,
        name: &str,
        op: &str,
        inputs: &[&str],
        outputs: &[&str],
        acc: bool,
        attrs: Value,
    ) {
        let node = self.doc.node(name, op, inputs, outputs);
        if acc {
            node.on_accelerator();
        }
        if let Value::Object(map) = attrs {
            node.attrs = map;
        }
        if matches!(op, "If" | "While" | "Loop") {
            node.control_flow();
        }
    }

    pub fn output(&mut self, t: &str) {
        self.doc.outputs.push(t.into());
    }

    pub fn node_count(&self) -> usize {
        self.doc.nodes.len()
    }

    pub fn finish(self) -> GraphDoc {
        self.doc
    }
}

fn fixed(dims: &[u64]) -> Vec<DimDoc> {
    dims.iter().map(|&d| DimDoc::Fixed(d)).collect()
}

fn sym(name: &str, max: u64) -> DimDoc {
    DimDoc::Sym {
        sym: name.into(),
        max: Some(max),
    }
}

fn none() -> Value {
    json!({})
}

/// `n` Relu nodes in a line over `[1, 64]` tensors.
pub fn chain(n: usize) -> GraphDoc {
    let mut b = Builder::new();
    let mut x = b.input("x", DType::F32, fixed(&[1, 64]));
    for i in 0..n {
        x = b.op(&format!("relu{i}"), "Relu", &[&x], false, none());
    }
    b.output(&x);
    b.finish()
}

/// A -> {B, C} -> D.
pub fn diamond() -> GraphDoc {
    let mut b = Builder::new();
    let x = b.input("x", DType::F32, fixed(&[1, 256]));
    let a = b.op("A", "Dense", &[&x], false, json!({"units": 256}));
    let l = b.op("B", "Dense", &[&a], false, json!({"units": 256}));
    let r = b.op("C", "Dense", &[&a], false, json!({"units": 256}));
    let d = b.op("D", "Add", &[&l, &r], false, none());
    b.output(&d);
    b.finish()
}

/// One Dense layer.
pub fn single_op() -> GraphDoc {
    let mut b = Builder::new();
    let x = b.input("x", DType::F32, fixed(&[16, 512]));
    let y = b.op("fc", "Dense", &[&x], false, json!({"units": 512}));
    b.output(&y);
    b.finish()
}

/// `steps` Relu nodes over 25-element f32 tensors (100 bytes each).
pub fn equal_tensor_chain(steps: usize) -> GraphDoc {
    let mut b = Builder::new();
    let mut x = b.input("x", DType::F32, fixed(&[25]));
    for i in 0..steps {
        x = b.op(&format!("step{i}"), "Relu", &[&x], false, none());
    }
    b.output(&x);
    b.finish()
}

/// Fan-out blocks: each block splits into `w` chains of three Dense layers
/// and merges them with an elementwise sum.
pub fn multi_branch(widths: &[usize]) -> GraphDoc {
    let mut b = Builder::new();
    let x = b.input("x", DType::F32, fixed(&[16, 256]));
    let mut h = b.op("stem", "Dense", &[&x], false, json!({"units": 256}));
    for (k, &w) in widths.iter().enumerate() {
        let split = b.op(&format!("b{k}_in"), "Relu", &[&h], false, none());
        let mut ends = Vec::with_capacity(w);
        for j in 0..w {
            let mut t = split.clone();
            for d in 0..3 {
                t = b.op(
                    &format!("b{k}_p{j}_fc{d}"),
                    "Dense",
                    &[&t],
                    false,
                    json!({"units": 256}),
                );
            }
            ends.push(t);
        }
        let refs: Vec<&str> = ends.iter().map(String::as_str).collect();
        h = b.op(&format!("b{k}_sum"), "AddN", &refs, false, none());
    }
    b.output(&h);
    b.finish()
}

pub const MULTI_BRANCH_WIDTHS: [usize; 8] = [2, 2, 3, 3, 4, 4, 6, 8];

/// CPU op, three heavy accelerator Dense layers, CPU op.
pub fn offload_chain() -> GraphDoc {
    let mut b = Builder::new();
    let x = b.input("x", DType::F32, fixed(&[256, 1024]));
    let mut h = b.op("pre", "LayerNorm", &[&x], false, none());
    for i in 0..3 {
        h = b.op(
            &format!("fc{i}"),
            "Dense",
            &[&h],
            true,
            json!({"units": 1024}),
        );
    }
    let y = b.op("post", "Softmax", &[&h], false, none());
    b.output(&y);
    b.finish()
}

struct Attn {
    d: u64,
    heads: u64,
    ffn: u64,
}

/// Self-attention core: LayerNorm, Q/K/V projections, scaled dot product and
/// output projection with residual. Returns the residual sum.
fn attention(
    b: &mut Builder,
    p: &str,
    h: &str,
    kv: Option<&str>,
    cfg: &Attn,
    scale: &str,
) -> String {
    let dh = (cfg.d / cfg.heads) as i64;
    let units = json!({ "units": cfg.d });
    let ln = b.op(&format!("{p}_ln"), "LayerNorm", &[h], false, none());
    let src = kv.unwrap_or(&ln).to_string();
    let q = b.op(&format!("{p}_q"), "Dense", &[&ln], true, units.clone());
    let k = b.op(&format!("{p}_k"), "Dense", &[&src], true, units.clone());
    let v = b.op(&format!("{p}_v"), "Dense", &[&src], true, units.clone());
    let split = json!({"shape": [1, -1, cfg.heads as i64, dh]});
    let heads = json!({"perm": [0, 2, 1, 3]});
    let qr = b.op(
        &format!("{p}_q_reshape"),
        "Reshape",
        &[&q],
        false,
        split.clone(),
    );
    let kr = b.op(
        &format!("{p}_k_reshape"),
        "Reshape",
        &[&k],
        false,
        split.clone(),
    );
    let vr = b.op(&format!("{p}_v_reshape"), "Reshape", &[&v], false, split);
    let qt = b.op(
        &format!("{p}_q_heads"),
        "Transpose",
        &[&qr],
        false,
        heads.clone(),
    );
    let kt = b.op(
        &format!("{p}_k_heads"),
        "Transpose",
        &[&kr],
        false,
        heads.clone(),
    );
    let vt = b.op(
        &format!("{p}_v_heads"),
        "Transpose",
        &[&vr],
        false,
        heads.clone(),
    );
    let s = b.op(
        &format!("{p}_scores"),
        "MatMul",
        &[&qt, &kt],
        true,
        json!({"transpose_b": true}),
    );
    let s = b.op(&format!("{p}_scale"), "Mul", &[&s, scale], true, none());
    let probs = b.op(&format!("{p}_softmax"), "Softmax", &[&s], false, none());
    let ctx = b.op(
        &format!("{p}_context"),
        "MatMul",
        &[&probs, &vt],
        true,
        none(),
    );
    let ctx = b.op(
        &format!("{p}_merge_heads"),
        "Transpose",
        &[&ctx],
        false,
        heads,
    );
    let ctx = b.op(
        &format!("{p}_merge"),
        "Reshape",
        &[&ctx],
        false,
        json!({"shape": [1, -1, cfg.d as i64]}),
    );
    let o = b.op(&format!("{p}_proj"), "Dense", &[&ctx], true, units);
    b.op(&format!("{p}_residual"), "Add", &[h, &o], true, none())
}

/// LayerNorm, two Dense layers with Gelu, residual sum.
fn feed_forward(b: &mut Builder, p: &str, h: &str, cfg: &Attn) -> String {
    let ln = b.op(&format!("{p}_ln"), "LayerNorm", &[h], false, none());
    let f = b.op(
        &format!("{p}_fc1"),
        "Dense",
        &[&ln],
        true,
        json!({"units": cfg.ffn}),
    );
    let f = b.op(&format!("{p}_gelu"), "Gelu", &[&f], true, none());
    let f = b.op(
        &format!("{p}_fc2"),
        "Dense",
        &[&f],
        true,
        json!({"units": cfg.d}),
    );
    b.op(&format!("{p}_residual"), "Add", &[h, &f], true, none())
}

/// 353-node encoder with attention fragmented by CPU-only reshapes,
/// transposes, softmax and normalisation.
pub fn fragmented_transformer() -> GraphDoc {
    let cfg = Attn {
        d: 768,
        heads: 12,
        ffn: 3072,
    };
    let mut b = Builder::new();
    let ids = b.input(
        "input_ids",
        DType::I32,
        vec![DimDoc::Fixed(1), sym("seq", 128)],
    );
    let table = b.constant("embedding_table", DType::F32, &[1000, 768]);
    let pos = b.constant("position_table", DType::F32, &[1, 128, 768]);
    let scale = b.constant("attn_scale", DType::F32, &[1]);
    let e = b.op(
        "embed",
        "Gather",
        &[&table, &ids],
        false,
        json!({"axis": 0}),
    );
    let e = b.op("embed_pos", "Add", &[&e, &pos], true, none());
    let mut h = b.op("embed_ln", "LayerNorm", &[&e], false, none());
    for blk in 0..15 {
        h = attention(&mut b, &format!("l{blk}_attn"), &h, None, &cfg, &scale);
        h = feed_forward(&mut b, &format!("l{blk}_ffn"), &h, &cfg);
    }
    let h = b.op("final_ln", "LayerNorm", &[&h], false, none());
    let h = b.op(
        "pool",
        "ReduceMean",
        &[&h],
        false,
        json!({"axes": [1], "keepdims": false}),
    );
    let h = b.op("pooler", "Dense", &[&h], true, json!({"units": 768}));
    let h = b.op("pooler_act", "Tanh", &[&h], true, none());
    let y = b.op("classifier", "Dense", &[&h], true, json!({"units": 2}));
    b.output(&y);
    b.finish()
}

/// 627-node encoder/decoder with a convolutional front end, cross-attention
/// and a control-flow decode step.
pub fn whisper_like() -> GraphDoc {
    let cfg = Attn {
        d: 384,
        heads: 6,
        ffn: 1536,
    };
    let mut b = Builder::new();
    let mel = b.input("mel", DType::F32, fixed(&[1, 80, 1, 3000]));
    let tokens = b.input(
        "tokens",
        DType::I32,
        vec![DimDoc::Fixed(1), sym("tokens", 448)],
    );
    let embed = b.constant("token_table", DType::F32, &[2048, 384]);
    let enc_pos = b.constant("encoder_positions", DType::F32, &[1, 1500, 384]);
    let dec_pos = b.constant("decoder_positions", DType::F32, &[1, 448, 384]);
    let scale = b.constant("attn_scale", DType::F32, &[1]);

    let c = b.op(
        "conv1",
        "Conv2D",
        &[&mel],
        true,
        json!({"filters": 384, "kernel": [1, 3], "pads": 0}),
    );
    let c = b.op("conv1_gelu", "Gelu", &[&c], true, none());
    let c = b.op(
        "conv2",
        "Conv2D",
        &[&c],
        true,
        json!({"filters": 384, "kernel": [1, 3], "strides": [1, 2], "padding": "same"}),
    );
    let c = b.op("conv2_gelu", "Gelu", &[&c], true, none());
    let c = b.op(
        "frames",
        "Reshape",
        &[&c],
        false,
        json!({"shape": [1, 384, 1499]}),
    );
    let c = b.op(
        "frames_t",
        "Transpose",
        &[&c],
        false,
        json!({"perm": [0, 2, 1]}),
    );
    let c = b.op("frames_pad", "Pad", &[&c], false, none());
    // Pad has no shape rule; it is declared by patching below.
    let pad_out = c.clone();
    let mut h = b.op("encoder_pos", "Add", &[&c, &enc_pos], true, none());
    for blk in 0..4 {
        h = attention(&mut b, &format!("enc{blk}_attn"), &h, None, &cfg, &scale);
        h = feed_forward(&mut b, &format!("enc{blk}_ffn"), &h, &cfg);
    }
    let enc = b.op("encoder_ln", "LayerNorm", &[&h], false, none());

    let t = b.op(
        "dec_embed",
        "Gather",
        &[&embed, &tokens],
        false,
        json!({"axis": 0}),
    );
    let mut h = b.op("dec_pos", "Add", &[&t, &dec_pos], true, none());
    let mut blk = 0;
    // Each decoder block is 41 nodes; the tail pads the total to 627.
    while b.node_count() + 41 + 8 <= 627 {
        h = attention(&mut b, &format!("dec{blk}_self"), &h, None, &cfg, &scale);
        h = attention(
            &mut b,
            &format!("dec{blk}_cross"),
            &h,
            Some(&enc),
            &cfg,
            &scale,
        );
        h = feed_forward(&mut b, &format!("dec{blk}_ffn"), &h, &cfg);
        blk += 1;
    }
    let h = b.op("decoder_ln", "LayerNorm", &[&h], false, none());
    let mut logits = b.op("logits", "Dense", &[&h], true, json!({"units": 2048}));
    let mut i = 0;
    while b.node_count() + 1 < 627 {
        let (op, acc) = if i % 2 == 0 {
            ("Softmax", false)
        } else {
            ("Log", true)
        };
        logits = b.op(&format!("decode{i}"), op, &[&logits], acc, none());
        i += 1;
    }
    let next = b.op_declared(
        "decode_step",
        "If",
        &[&logits],
        false,
        none(),
        &[vec![
            DimDoc::Fixed(1),
            sym("tokens", 448),
            DimDoc::Fixed(2048),
        ]],
    );
    b.output(&next[0]);
    let mut doc = b.finish();
    let padded = doc
        .tensors
        .iter_mut()
        .find(|t| t.id == pad_out)
        .expect("pad output exists");
    padded.shape = Some(fixed(&[1, 1500, 384]));
    doc
}

/// 480-node CNN detector: an accelerator-only body and a four-node CPU
/// post-processing tail.
pub fn yolo_like() -> GraphDoc {
    let mut b = Builder::new();
    let img = b.input("images", DType::F32, fixed(&[1, 3, 320, 320]));
    let conv = |b: &mut Builder, name: &str, x: &str, filters: u64, k: u64, stride: u64| {
        let c = b.op(
            name,
            "Conv2D",
            &[x],
            true,
            json!({"filters": filters, "kernel": k, "strides": stride, "padding": "same"}),
        );
        b.op(&format!("{name}_act"), "Silu", &[&c], true, none())
    };
    let mut x = conv(&mut b, "stem", &img, 16, 3, 2);
    let mut taps = Vec::new();
    let mut channels = 16;
    // 4 stages of a stride-2 conv followed by 12-node blocks (conv, split,
    // bottleneck, concat, conv); a Relu neck pads the body to size.
    let blocks_per_stage = [9, 9, 10, 10];
    for (stage, &blocks) in blocks_per_stage.iter().enumerate() {
        channels = (channels * 2).min(128);
        x = conv(&mut b, &format!("down{stage}"), &x, channels, 3, 2);
        for blk in 0..blocks {
            let p = format!("s{stage}b{blk}");
            let y = conv(&mut b, &format!("{p}_in"), &x, channels, 1, 1);
            let halves = b.op_declared(
                &format!("{p}_split"),
                "Split",
                &[&y],
                true,
                json!({"axis": 1}),
                &[vec![], vec![]],
            );
            let m = conv(&mut b, &format!("{p}_m0"), &halves[1], channels / 2, 3, 1);
            let m = conv(&mut b, &format!("{p}_m1"), &m, channels / 2, 3, 1);
            let m = b.op(&format!("{p}_res"), "Add", &[&halves[1], &m], true, none());
            let cat = b.op(
                &format!("{p}_cat"),
                "Concat",
                &[&halves[0], &m],
                true,
                json!({"axis": 1}),
            );
            x = conv(&mut b, &format!("{p}_out"), &cat, channels, 1, 1);
        }
        if stage >= 1 {
            taps.push(x.clone());
        }
    }
    let mut k = 0;
    while b.node_count() + 7 + 4 < 480 {
        x = b.op(&format!("neck{k}"), "Relu", &[&x], true, none());
        k += 1;
    }
    *taps.last_mut().expect("three taps") = x.clone();
    let mut flat = Vec::new();
    for (i, tap) in taps.iter().enumerate() {
        let h = b.op(
            &format!("head{i}"),
            "Conv2D",
            &[tap],
            true,
            json!({"filters": 16, "kernel": 1}),
        );
        flat.push(b.op(
            &format!("head{i}_flat"),
            "Reshape",
            &[&h],
            true,
            json!({"shape": [1, 16, -1]}),
        ));
    }
    let refs: Vec<&str> = flat.iter().map(String::as_str).collect();
    let det = b.op("detections", "Concat", &refs, true, json!({"axis": 2}));
    let det = b.op(
        "detections_t",
        "Transpose",
        &[&det],
        false,
        json!({"perm": [0, 2, 1]}),
    );
    let det = b.op("scores", "Sigmoid", &[&det], false, none());
    let keep = b.op_declared(
        "nms",
        "NonMaxSuppression",
        &[&det],
        false,
        none(),
        &[vec![sym("kept", 300), DimDoc::Fixed(3)]],
    );
    let boxes = b.op_declared(
        "gather_boxes",
        "Slice",
        &[&det, &keep[0]],
        false,
        none(),
        &[vec![sym("kept", 300), DimDoc::Fixed(16)]],
    );
    b.output(&boxes[0]);
    let mut doc = b.finish();
    fill_split_shapes(&mut doc);
    doc
}

/// Split outputs were declared empty as placeholders; dropping them lets
/// shape inference derive the halves.
fn fill_split_shapes(doc: &mut GraphDoc) {
    for t in &mut doc.tensors {
        if t.shape.as_ref().is_some_and(Vec::is_empty) {
            t.shape = None;
        }
    }
}

/// Parameters for [`random_dag`].
#[derive(Debug, Clone, Copy)]
pub struct RandomDagConfig {
    pub nodes: usize,
    /// Probability that a node just continues the previous one.
    pub chain_prob: f64,
    /// Predecessors are drawn from this many most recent nodes.
    pub window: usize,
    pub max_fan_in: usize,
    pub accelerator_prob: f64,
    pub control_flow_prob: f64,
}

impl RandomDagConfig {
    pub fn new(nodes: usize) -> Self {
        RandomDagConfig {
            nodes,
            chain_prob: 0.6,
            window: 16,
            max_fan_in: 3,
            accelerator_prob: 0.6,
            control_flow_prob: 0.02,
        }
    }
}

/// Random DAG over `[1, 16]` f32 tensors; nodes are declared in topological order.
pub fn random_dag(cfg: &RandomDagConfig, seed: u64) -> GraphDoc {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new();
    let x = b.input("x", DType::F32, fixed(&[1, 16]));
    let mut outs: Vec<String> = Vec::with_capacity(cfg.nodes);
    let mut used = vec![false; cfg.nodes];
    for i in 0..cfg.nodes {
        let mut preds: Vec<usize> = Vec::new();
        if i > 0 {
            if rng.gen_bool(cfg.chain_prob) {
                preds.push(i - 1);
            } else {
                let lo = i.saturating_sub(cfg.window);
                let fan = rng.gen_range(1..=cfg.max_fan_in.max(1));
                for _ in 0..fan {
                    let p = rng.gen_range(lo..i);
                    if !preds.contains(&p) {
                        preds.push(p);
                    }
                }
            }
        }
        let inputs: Vec<&str> = if preds.is_empty() {
            vec![x.as_str()]
        } else {
            preds.iter().map(|&p| outs[p].as_str()).collect()
        };
        for &p in &preds {
            used[p] = true;
        }
        let acc = rng.gen_bool(cfg.accelerator_prob);
        let name = format!("n{i}");
        let out = if rng.gen_bool(cfg.control_flow_prob) {
            b.op_declared(&name, "If", &inputs, false, none(), &[fixed(&[1, 16])])
                .remove(0)
        } else if inputs.len() == 1 {
            b.op(&name, "Relu", &inputs, acc, none())
        } else {
            b.op(&name, "Add", &inputs, acc, none())
        };
        outs.push(out);
    }
    for (i, t) in outs.iter().enumerate() {
        if !used[i] {
            b.output(t);
        }
    }
    b.finish()
}

/// Named fixture set written to disk by the `gen_fixtures` example.
pub fn fixtures() -> Vec<(&'static str, GraphDoc)> {
    vec![
        ("chain", chain(4)),
        ("diamond", diamond()),
        ("single_op", single_op()),
        ("chain50", equal_tensor_chain(50)),
        ("multi_branch", multi_branch(&MULTI_BRANCH_WIDTHS)),
        ("offload_chain", offload_chain()),
        ("fragmented_transformer", fragmented_transformer()),
        ("whisper_like", whisper_like()),
        ("yolo_like", yolo_like()),
    ]
}

pub fn fixture(name: &str) -> Option<Graph> {
    fixtures()
        .into_iter()
        .find(|(n, _)| *n == name)
        .map(|(_, d)| Graph::from_doc(&d).expect("generated fixtures are well formed"))
}
