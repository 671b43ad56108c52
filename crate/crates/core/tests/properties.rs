use octgan_core::dataio::{decode_checkpoint, encode_checkpoint, GrayImage};
use octgan_core::lossopt::bce;
use octgan_core::nn::{conv2d_forward, conv_transpose2d_forward, AffineParams};
use octgan_core::par::{set_execution, Execution};
use octgan_core::phantom::{build_dataset, DatasetConfig};
use octgan_core::{Rng, Tensor};
use proptest::prelude::*;

/// Input extent for which a conv with these settings yields `out` positions.
fn input_extent(out: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    ((out - 1) * s + k).checked_sub(2 * p).filter(|&h| h >= 1)
}

#[derive(Debug, Clone)]
struct ConvCase {
    batch: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    s: usize,
    p: usize,
    out: usize,
    seed: u64,
}

fn conv_case() -> impl Strategy<Value = ConvCase> {
    (1usize..3, 1usize..4, 1usize..4, 3usize..5, 1usize..3, 0usize..2, 1usize..6, any::<u64>())
        .prop_filter("input must be non-empty", |&(_, _, _, k, s, p, out, _)| input_extent(out, k, s, p).is_some())
        .prop_map(|(batch, c_in, c_out, k, s, p, out, seed)| ConvCase { batch, c_in, c_out, k, s, p, out, seed })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_transpose_is_the_adjoint_of_conv(case in conv_case()) {
        let ConvCase { batch, c_in, c_out, k, s, p, out, seed } = case;
        let h = input_extent(out, k, s, p).unwrap();
        let mut rng = Rng::new(seed);
        let x = Tensor::<f64>::randn(&[batch, c_in, h, h], &mut rng).unwrap();
        let y = Tensor::<f64>::randn(&[batch, c_out, out, out], &mut rng).unwrap();
        let w = Tensor::<f64>::randn(&[c_out, c_in, k, k], &mut rng).unwrap();
        // A transposed conv takes the kernel of the conv it is the adjoint of.
        let conv = AffineParams { weight: w.clone(), bias: Tensor::zeros(&[c_out]).unwrap() };
        let convt = AffineParams { weight: w, bias: Tensor::zeros(&[c_in]).unwrap() };
        let (cx, _) = conv2d_forward(&x, &conv, s, p).unwrap();
        let (ty, _) = conv_transpose2d_forward(&y, &convt, s, p).unwrap();
        prop_assert_eq!(ty.shape(), x.shape());
        let lhs = cx.dot(&y).unwrap();
        let rhs = x.dot(&ty).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-10, "{} vs {}", lhs, rhs);
    }

    #[test]
    fn sequential_and_parallel_convs_agree_bitwise(case in conv_case()) {
        let ConvCase { batch, c_in, c_out, k, s, p, out, seed } = case;
        let h = input_extent(out, k, s, p).unwrap();
        let mut rng = Rng::new(seed);
        let x = Tensor::<f32>::randn(&[batch, c_in, h, h], &mut rng).unwrap();
        let params = AffineParams {
            weight: Tensor::randn(&[c_out, c_in, k, k], &mut rng).unwrap(),
            bias: Tensor::randn(&[c_out], &mut rng).unwrap(),
        };
        set_execution(Execution::Sequential);
        let (a, _) = conv2d_forward(&x, &params, s, p).unwrap();
        set_execution(Execution::Parallel);
        let (b, _) = conv2d_forward(&x, &params, s, p).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn bce_ignores_the_order_of_pairs(seed in any::<u64>(), n in 1usize..64) {
        let mut rng = Rng::new(seed);
        let probs: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let labels: Vec<f64> = (0..n).map(|_| if rng.coin() { 1.0 } else { 0.0 }).collect();
        let perm = rng.permutation(n);
        let t = |v: Vec<f64>| Tensor::from_vec(&[n], v).unwrap();
        let base = bce(&t(probs.clone()), &t(labels.clone())).unwrap();
        let shuffled = bce(&t(perm.iter().map(|&i| probs[i]).collect()), &t(perm.iter().map(|&i| labels[i]).collect())).unwrap();
        prop_assert!((base - shuffled).abs() <= 1e-12 * base.abs().max(1.0));
    }

    #[test]
    fn images_survive_encoding(w in 1usize..40, h in 1usize..40, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut img = GrayImage::new(w, h).unwrap();
        img.pixels.iter_mut().for_each(|p| *p = rng.int_range(0, 255) as u8);
        prop_assert_eq!(GrayImage::decode(&img.encode()).unwrap(), img);
    }

    #[test]
    fn checkpoints_survive_encoding(seed in any::<u64>(), count in 1usize..5) {
        let mut rng = Rng::new(seed);
        let tensors: Vec<(String, Tensor<f32>)> = (0..count)
            .map(|i| {
                let shape: Vec<usize> = (0..rng.int_range(1, 4)).map(|_| rng.int_range(1, 5) as usize).collect();
                (format!("t.{i}"), Tensor::randn(&shape, &mut rng).unwrap())
            })
            .collect();
        let back = decode_checkpoint(&encode_checkpoint(&tensors).unwrap()).unwrap();
        prop_assert_eq!(back, tensors);
    }
}

#[test]
fn sequential_and_parallel_datasets_agree_bitwise() {
    let config = DatasetConfig { count: 24, seed: 11, ..Default::default() };
    set_execution(Execution::Sequential);
    let a = build_dataset(&config).unwrap();
    set_execution(Execution::Parallel);
    let b = build_dataset(&config).unwrap();
    assert_eq!(a.images, b.images);
    assert_eq!(a.entries, b.entries);
}
