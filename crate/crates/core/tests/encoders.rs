use apt_core::diff::{finite_diff_check, DiffError, Graph, Objective, Real, Tensor, Var};
use apt_core::encoders::{
    DensePath, LocalityMask, TextConfig, TextEncoder, VisualConfig, VisualEncoder,
};
use apt_core::image::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tokens(r: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let data = (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![n, d], data).unwrap()
}

fn norm(row: &[f32]) -> f64 {
    row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn encode_image_shapes_and_norms() {
    let enc = VisualEncoder::init(VisualConfig::default(), &mut rng(1)).unwrap();
    let mut r = rng(2);
    let img = Image::new(64, 64, (0..64 * 64).map(|_| r.random::<f32>()).collect());
    for path in [DensePath::Locality, DensePath::Global] {
        let f = enc.encode(&img, path).unwrap();
        assert_eq!(f.features.shape(), &[64, 32]);
        for i in 0..64 {
            assert!((norm(f.features.row(i)) - 1.0).abs() < 1e-6);
            assert!((norm(f.taps[0].row(i)) - 1.0).abs() < 1e-6);
        }
        assert!((norm(f.cls.data()) - 1.0).abs() < 1e-6);
    }
}

#[test]
fn bad_images_are_rejected() {
    let enc = VisualEncoder::init(VisualConfig::default(), &mut rng(1)).unwrap();
    assert!(enc.encode(&Image::filled(64, 32, 0.0), DensePath::Locality).is_err());
    assert!(enc.encode(&Image::filled(60, 60, 0.0), DensePath::Locality).is_err());
}

#[test]
fn locality_attention_is_zero_outside_radius() {
    let enc = VisualEncoder::init(VisualConfig::default(), &mut rng(3)).unwrap();
    let mut r = rng(4);
    for g in [3usize, 5] {
        let mask = LocalityMask::new(g, 1.0);
        let n = mask.tokens();
        let tokens = random_tokens(&mut r, n, 32);
        let out = enc.lat_block_forward(&tokens, 1, &mask).unwrap();
        for q in 0..n {
            let row = out.attn_local.row(q);
            assert!((row.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs() < 1e-6);
            let grow = out.attn_global.row(q);
            assert!((grow.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs() < 1e-6);
            for k in 0..n {
                if !mask.is_open(q, k) {
                    assert!(row[k].abs() <= 1e-9);
                }
            }
        }
        if g == 3 {
            // corner (0,0): itself, (0,1), (1,0) and CLS
            let corner = mask.token(0, 0);
            let nonzero: Vec<usize> = (0..n)
                .filter(|&k| out.attn_local.row(corner)[k] > 0.0)
                .collect();
            assert_eq!(nonzero, vec![0, mask.token(0, 0), mask.token(0, 1), mask.token(1, 0)]);
        }
    }
}

#[test]
fn open_mask_matches_global_attention() {
    let enc = VisualEncoder::init(VisualConfig::default(), &mut rng(5)).unwrap();
    let g = 4;
    let mask = LocalityMask::new(g, 2f64.sqrt() * 3.0);
    let tokens = random_tokens(&mut rng(6), g * g + 1, 32);
    let out = enc.lat_block_forward(&tokens, 0, &mask).unwrap();
    for (a, b) in out.attn_local.data().iter().zip(out.attn_global.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn bright_patch_translation_permutes_feature_rows() {
    let mut enc = VisualEncoder::init(VisualConfig::default(), &mut rng(7)).unwrap();
    enc.params_mut()
        .get_mut("visual.pos")
        .unwrap()
        .data_mut()
        .fill(0.0);
    let place = |gy: usize, gx: usize| {
        let mut img = Image::filled(64, 64, 0.2);
        for y in 0..8 {
            for x in 0..8 {
                img.set(gy * 8 + y, gx * 8 + x, 0.9);
            }
        }
        img
    };
    let a = enc.encode(&place(3, 3), DensePath::Locality).unwrap();
    let b = enc.encode(&place(3, 4), DensePath::Locality).unwrap();
    for dy in -1i32..=1 {
        for dx in -1i32..=1 {
            let (y, x) = ((3 + dy) as usize, (3 + dx) as usize);
            let ra = a.features.row(y * 8 + x);
            let rb = b.features.row(y * 8 + x + 1);
            for (p, q) in ra.iter().zip(rb) {
                assert!((p - q).abs() < 1e-5, "cell ({y},{x})");
            }
        }
    }
}

#[test]
fn text_embeddings_are_unit_and_deterministic() {
    let enc = TextEncoder::init(TextConfig::default(), &mut rng(8));
    let z = enc.encode_text("this is an object without defect").unwrap();
    assert!((norm(z.data()) - 1.0).abs() < 1e-6);
    assert_eq!(z, enc.encode_text("this is an object without defect").unwrap());
    let too_long = vec![1usize; 17];
    assert!(enc.encode_ids(&too_long).is_err());
    assert!(enc.encode_text("").is_err());
}

struct PromptDot<'a> {
    enc: &'a TextEncoder,
    target: Vec<f32>,
}

impl Objective for PromptDot<'_> {
    fn build<T: Real>(&self, g: &mut Graph<T>, x: &[Var]) -> Result<Var, DiffError> {
        let vars = self.enc.bind(g, false, false);
        let z = self.enc.forward(g, &vars, x[0]).expect("valid prompt");
        let c = g.constant_raw(
            vec![self.target.len(), 1],
            self.target.iter().map(|&v| T::lit(v as f64)).collect(),
        )?;
        let dot = g.matmul(z, c)?;
        g.sum(dot)
    }
}

#[test]
fn text_gradient_matches_finite_differences() {
    let enc = TextEncoder::init(TextConfig::default(), &mut rng(9));
    let mut r = rng(10);
    let prompt = random_tokens(&mut r, 6, 32);
    let target: Vec<f32> = (0..32).map(|_| r.random_range(-1.0..1.0)).collect();
    let report = finite_diff_check(&PromptDot { enc: &enc, target }, &[prompt], 1e-4);
    assert!(report.passed, "{report:?}");
}

#[test]
fn encoder_parameters_receive_no_gradient_when_frozen() {
    let enc = TextEncoder::init(TextConfig::default(), &mut rng(11));
    let mut g = Graph::<f32>::new();
    let vars = enc.bind(&mut g, false, false);
    let p = g.leaf(&enc.embed_tokens(&[1, 2, 3]).unwrap());
    let z = enc.forward(&mut g, &vars, p).unwrap();
    let s = g.sum(z).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(p).is_some());
    for &v in vars.bound().vars() {
        assert!(grads.get(v).is_none());
    }
}
