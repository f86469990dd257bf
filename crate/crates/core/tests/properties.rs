use proptest::prelude::*;

use refsr_core::attention::{builtin_gates, HeadLayout, MixOnTape};
use refsr_core::data::{bicubic_resize, psnr, ssim, Image};
use refsr_core::numerics::{Tape, Tensor};
use refsr_core::windowing::{
    cyclic_shift, partition_shifted_windows, partition_windows, reverse_windows, Stream, TokenGrid,
};

fn image(w: usize, h: usize, c: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0f64..=1.0, w * h * c).prop_map(move |d| Image::new(w, h, c, d).unwrap())
}

fn sized_image(c: usize) -> impl Strategy<Value = Image> {
    (2usize..12, 2usize..12).prop_flat_map(move |(w, h)| image(w, h, c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gate_output_is_a_convex_combination(
        lambda in -30.0f64..30.0,
        data in prop::collection::vec(-5.0f64..5.0, 2 * 12),
    ) {
        let x = Tensor::new([2, 6], data[..12].to_vec()).unwrap();
        let y = Tensor::new([2, 6], data[12..].to_vec()).unwrap();
        let mixer = builtin_gates().get("full").unwrap();
        let mut tape = Tape::<f64>::new();
        let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
        let l = tape.constant(Tensor::from_fn([2], |_| lambda));
        let out = f64::mix(mixer.as_ref(), &mut tape, Some(xv), Some(yv), l, HeadLayout::Columns { dh: 3 }).unwrap();
        for ((&o, &a), &b) in tape.value(out).data().iter().zip(x.data()).zip(y.data()) {
            prop_assert!(o >= a.min(b) - 1e-12 && o <= a.max(b) + 1e-12);
        }
    }

    #[test]
    fn window_partitions_round_trip(
        k in 1usize..5,
        wy in 1usize..5,
        wx in 1usize..5,
        dim in 1usize..4,
        shift in -20isize..20,
        seed in any::<u64>(),
    ) {
        let (h, w) = (k * wy, k * wx);
        let tokens = Tensor::from_fn([h * w, dim], |i| (i as u64 ^ seed) as f64 * 1e-3);
        let g = TokenGrid::new(h, w, tokens, Stream::Ref).unwrap();
        prop_assert_eq!(&reverse_windows(&partition_windows(&g, k).unwrap()).unwrap(), &g);
        prop_assert_eq!(&reverse_windows(&partition_shifted_windows(&g, k).unwrap()).unwrap(), &g);
        prop_assert_eq!(&cyclic_shift(&cyclic_shift(&g, shift), -shift), &g);
    }

    #[test]
    fn psnr_falls_as_noise_grows(img in image(8, 8, 1), a in 0.01f64..0.2, grow in 1.1f64..4.0) {
        let noisy = |s: f64| Image::from_fn(8, 8, 1, |x, y, _| img.at(x, y, 0) + if (x + y) % 2 == 0 { s } else { -s });
        let near = psnr(&img, &noisy(a), 1.0).unwrap();
        let far = psnr(&img, &noisy(a * grow), 1.0).unwrap();
        prop_assert!(far < near);
    }

    #[test]
    fn bicubic_commutes_with_horizontal_flip(img in sized_image(3), ow in 1usize..20, oh in 1usize..20) {
        let a = bicubic_resize(&img.flip_horizontal(), ow, oh).unwrap();
        let b = bicubic_resize(&img, ow, oh).unwrap().flip_horizontal();
        for (x, y) in a.data.iter().zip(&b.data) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn ssim_is_symmetric_and_one_on_identity(a in image(12, 12, 1), b in image(12, 12, 1)) {
        let ab = ssim(&a, &b, 1.0).unwrap();
        let ba = ssim(&b, &a, 1.0).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
    }
}
