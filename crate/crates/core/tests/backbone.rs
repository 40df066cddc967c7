use fpc_core::backbone::{Backbone, BackboneConfig, Block, BlockKind};
use fpc_core::layers::{init, Init, ParamStore, Session};
use fpc_core::ops::Mode;
use fpc_core::Tensor;

fn block(kind: BlockKind, c_in: usize, c_out: usize, e: f64, stride: usize, se: f64, zero: bool) -> (ParamStore<f64>, Block) {
    let mut store = ParamStore::new();
    let b = Block::new(&mut Init::new(&mut store, 2, "b"), "b", kind, c_in, c_out, e, 3, stride, se, zero).unwrap();
    (store, b)
}

fn run_block(store: &ParamStore<f64>, b: &Block, x: &Tensor<f64>) -> (Tensor<f64>, Vec<Vec<usize>>) {
    let mut s = Session::new(store, Mode::Eval);
    let xn = s.graph.constant(x.clone());
    let t = b.forward_traced(&mut s, xn).unwrap();
    let shapes = t.activations.iter().map(|&a| s.graph.shape(a).to_vec()).collect();
    (s.graph.value(t.output).clone(), shapes)
}

#[test]
fn residual_block_with_zero_projection_is_identity() {
    let x = init::uniform::<f64>(&[2, 8, 6, 6], 1, 0);
    for kind in [BlockKind::MbConv, BlockKind::FusedMbConv] {
        // Zero-gamma initialisation on the last batch norm.
        let (store, b) = block(kind, 8, 8, 4.0, 1, 0.25, true);
        assert!(b.residual);
        assert_eq!(run_block(&store, &b, &x).0, x, "{kind}");

        // Zeroed projection weights with ordinary initialisation.
        let (mut store, b) = block(kind, 8, 8, 4.0, 1, 0.25, false);
        let w = b.project.unwrap().w;
        let shape = store.param(w).value.shape().to_vec();
        store.param_mut(w).value = Tensor::zeros(&shape);
        assert_eq!(run_block(&store, &b, &x).0, x, "{kind}");
    }
}

#[test]
fn stride_and_expansion_shapes() {
    let x = init::uniform::<f64>(&[1, 8, 8, 8], 1, 0);
    let (store, b) = block(BlockKind::MbConv, 8, 16, 4.0, 2, 0.25, true);
    assert_eq!(b.inner_channels, 32);
    assert!(!b.residual);
    let (y, acts) = run_block(&store, &b, &x);
    assert_eq!(acts, vec![vec![1, 32, 8, 8], vec![1, 32, 4, 4]]);
    assert_eq!(y.shape(), &[1, 16, 4, 4]);

    let (store, b) = block(BlockKind::FusedMbConv, 8, 16, 1.0, 2, 0.0, true);
    assert!(b.project.is_none());
    let (y, acts) = run_block(&store, &b, &x);
    assert_eq!(acts, vec![vec![1, 16, 4, 4]]);
    assert_eq!(y.shape(), &[1, 16, 4, 4]);
}

fn features(cfg: &BackboneConfig, images: &Tensor<f32>, seed: u64) -> Tensor<f32> {
    let mut store = ParamStore::new();
    let bb = Backbone::build(cfg, &mut Init::new(&mut store, seed, "backbone"), true).unwrap();
    let mut s = Session::new(&store, Mode::Eval);
    let x = s.graph.constant(images.clone());
    let f = bb.forward_features(&mut s, x).unwrap();
    s.graph.value(f).clone()
}

#[test]
fn feature_area_scales_with_input_area() {
    let cfg = BackboneConfig::micro();
    let small = features(&cfg, &Tensor::zeros(&[1, 1, 64, 64]), 0);
    let large = features(&cfg, &Tensor::zeros(&[1, 1, 128, 128]), 0);
    assert_eq!(small.shape(), &[1, 192, 4, 4]);
    assert_eq!(large.shape()[2] * large.shape()[3], 4 * small.shape()[2] * small.shape()[3]);
}

#[test]
fn identical_images_give_identical_rows() {
    let one = init::uniform::<f32>(&[1, 1, 64, 64], 3, 0);
    let f = features(&BackboneConfig::micro(), &Tensor::stack([&one.index_first(0), &one.index_first(0)]).unwrap(), 1);
    let n = f.numel() / 2;
    assert_eq!(f.data()[..n], f.data()[n..]);
}

#[test]
fn parameter_count_does_not_depend_on_seed() {
    let count = |seed| {
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::build(&BackboneConfig::micro(), &mut Init::new(&mut store, seed, "backbone"), true).unwrap();
        (store.count(&bb.params()), store.buffer_count(), store.params()[0].value.clone())
    };
    let (a, b) = (count(0), count(99));
    assert_eq!((a.0, a.1), (b.0, b.1));
    assert_ne!(a.2, b.2);
}

#[test]
fn every_parameter_receives_gradient_without_zero_init() {
    let cfg = BackboneConfig::parse(
        "in_channels = 1\ninput_resolution = 16\nstem_channels = 4\n\
         stage = fused_mbconv e=1 c=4 r=1 s=1 k=3 se=0\n\
         stage = fused_mbconv e=2 c=8 r=1 s=2 k=3 se=0\n\
         stage = mbconv e=2 c=8 r=2 s=1 k=3 se=0.5\nhead_channels = 12\n",
    )
    .unwrap();
    let mut store = ParamStore::<f64>::new();
    let bb = Backbone::build(&cfg, &mut Init::new(&mut store, 4, "backbone"), false).unwrap();
    let mut s = Session::new(&store, Mode::Train);
    let x = s.graph.constant(init::uniform(&[3, 1, 16, 16], 4, 99));
    let f = bb.forward_features(&mut s, x).unwrap();
    let w = s.graph.constant(init::uniform(s.graph.shape(f), 4, 100));
    let y = s.graph.mul(f, w).unwrap();
    let loss = s.graph.sum(y);
    s.graph.backward(loss).unwrap();
    for id in bb.params() {
        let g = s.param_grad(id).expect("bound parameter");
        assert!(g.data().iter().any(|&v| v != 0.0), "{} has zero gradient", store.param(id).name);
    }
}

#[test]
fn zero_init_silences_residual_branches_at_step_zero() {
    let cfg = BackboneConfig::parse(
        "in_channels = 1\ninput_resolution = 16\nstem_channels = 4\n\
         stage = fused_mbconv e=2 c=8 r=1 s=2 k=3 se=0\n\
         stage = mbconv e=2 c=8 r=2 s=1 k=3 se=0.5\nhead_channels = 12\n",
    )
    .unwrap();
    let mut store = ParamStore::<f64>::new();
    let bb = Backbone::build(&cfg, &mut Init::new(&mut store, 4, "backbone"), true).unwrap();
    let mut s = Session::new(&store, Mode::Train);
    let x = s.graph.constant(init::uniform(&[3, 1, 16, 16], 4, 99));
    let f = bb.forward_features(&mut s, x).unwrap();
    let w = s.graph.constant(init::uniform(s.graph.shape(f), 4, 100));
    let y = s.graph.mul(f, w).unwrap();
    let loss = s.graph.sum(y);
    s.graph.backward(loss).unwrap();
    let nonzero = |id| s.param_grad(id).unwrap().data().iter().any(|&v| v != 0.0);
    for b in &bb.blocks {
        let last = b.project.unwrap().bn;
        for id in b.params() {
            // Inside a residual branch only the zero-gamma batch norm itself learns at step 0.
            let expect = !b.residual || id == last.gamma || id == last.beta;
            assert_eq!(nonzero(id), expect, "{}", store.param(id).name);
        }
    }
    assert!(bb.blocks.iter().any(|b| b.residual));
}

#[test]
fn invalid_configs_are_rejected() {
    let base = "in_channels = 1\ninput_resolution = 16\nstem_channels = 4\nhead_channels = 12\n";
    assert!(BackboneConfig::parse(base).is_err(), "no stages");
    assert!(BackboneConfig::parse(&format!("{base}stage = mbconv c=8 s=3\n")).is_err());
    assert!(BackboneConfig::parse(&format!("{base}stage = mbconv c=8 k=4\n")).is_err());
    assert!(BackboneConfig::parse(&format!("{base}stage = convnext c=8\n")).is_err());
    assert!(BackboneConfig::parse(&format!("{base}stage = mbconv c=8 s=2\nstage = mbconv c=8 s=2\nstage = mbconv c=8 s=2\nstage = mbconv c=8 s=2\n")).is_err(), "16 not divisible by 32");
    assert!(BackboneConfig::parse(&format!("{base}stage = mbconv c=8\nwidth = 3\n")).is_err());
}

#[test]
fn b0_preset_feature_map() {
    let cfg = BackboneConfig::b0();
    assert_eq!(cfg.feature_resolution(), 7);
    let f = features(&cfg, &Tensor::zeros(&[1, 3, 224, 224]), 0);
    assert_eq!(f.shape(), &[1, 1280, 7, 7]);
    assert_eq!(BackboneConfig::v2b0().head_channels, 1280);
}
