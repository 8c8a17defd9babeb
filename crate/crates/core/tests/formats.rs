use discgen::checkpoint::{self, MAGIC};
use discgen::data::{
    encode_binary_records, generate_shapes, load_binary_records, scale_and_crop, LabeledImageSet, ShapeSpec, Split,
};
use discgen::distributions::Rng;
use discgen::eval::{interpolate, reconstruct};
use discgen::gradcheck::tiny_arch;
use discgen::image::{image_grid_ppm, write_image_grid};
use discgen::model::{ModelBundle, Part};
use discgen::{Error, Scalar, Tensor};

fn hex(s: &str) -> Vec<u8> {
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap()).collect()
}

#[test]
fn checkpoint_vectors() {
    assert_eq!(checkpoint::encode::<f32>(&[]), hex("44474e31010000000000000090a550c2"));

    let w = Tensor::<f32>::from_f64(vec![1], &[1.0]).unwrap();
    let want = hex("44474e3101000000010000000100770001010000000000803fe2f1a524");
    assert_eq!(checkpoint::encode(&[("w", &w)]), want);
    let back = checkpoint::decode::<f32>(&want, None).unwrap();
    assert_eq!(back, vec![("w".to_string(), w)]);

    let v = Tensor::<f64>::from_f64(vec![1, 2], &[0.5, -2.0]).unwrap();
    let want = hex("44474e31010000000100000001007601020100000002000000000000000000e03f00000000000000c096e4533c");
    assert_eq!(checkpoint::encode(&[("v", &v)]), want);
    assert!(matches!(checkpoint::decode::<f32>(&want, None), Err(Error::DtypeMismatch { .. })));
    assert_eq!(&want[..4], &MAGIC);
}

fn round_trip<T: Scalar>() {
    let dir = tempfile::tempdir().unwrap();
    let arch = tiny_arch();
    let a = ModelBundle::<T>::init(&arch, &mut Rng::new(1)).unwrap();
    let path = dir.path().join("a.ckpt");
    a.save(&path, Part::All).unwrap();
    let mut b = ModelBundle::<T>::init(&arch, &mut Rng::new(2)).unwrap();
    b.load(&path, Part::All).unwrap();
    let again = dir.path().join("b.ckpt");
    b.save(&again, Part::All).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    for ((_, pa), (_, pb)) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(pa.value, pb.value, "{}", pa.name);
    }
}

#[test]
fn bundle_checkpoints_round_trip_bit_exactly() {
    round_trip::<f32>();
    round_trip::<f64>();
}

#[test]
fn checkpoint_for_another_arch_is_rejected() {
    let a = ModelBundle::<f32>::init(&tiny_arch(), &mut Rng::new(1)).unwrap();
    let mut arch = tiny_arch();
    arch.latent_dim += 1;
    let mut b = ModelBundle::<f32>::init(&arch, &mut Rng::new(1)).unwrap();
    let e = b.load_bytes(&a.checkpoint_bytes(Part::All), Part::All).unwrap_err();
    assert!(matches!(e, Error::ShapeMismatch { .. }), "{e:?}");
}

#[test]
fn ppm_vectors() {
    let white = Tensor::<f32>::ones(vec![1, 3, 1, 1]);
    let mut want = b"P6\n1 1\n255\n".to_vec();
    want.extend_from_slice(&[0xFF, 0xFF, 0xFF]);
    assert_eq!(image_grid_ppm(&white, 1, 1).unwrap(), want);

    // Grayscale images repeat their channel; out-of-range values clamp.
    let g = Tensor::<f64>::from_f64(vec![4, 1, 1, 1], &[-1.0, 0.0, 1.7, -0.5]).unwrap();
    let mut want = b"P6\n4 1\n255\n".to_vec();
    for b in [0u8, 128, 255, 64] {
        want.extend_from_slice(&[b, b, b]);
    }
    assert_eq!(image_grid_ppm(&g, 1, 4).unwrap(), want);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grid.ppm");
    write_image_grid(&Tensor::<f32>::zeros(vec![4, 3, 8, 8]), 2, 2, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert!(bytes.starts_with(b"P6\n16 16\n255\n"));
    assert_eq!(bytes.len(), 13 + 16 * 16 * 3);
}

#[test]
fn ppm_tiles_row_major() {
    let mut data = Vec::new();
    for i in 0..4 {
        data.extend(std::iter::repeat(i as f64 / 3.0 * 2.0 - 1.0).take(3 * 2 * 2));
    }
    let x = Tensor::<f64>::from_f64(vec![4, 3, 2, 2], &data).unwrap();
    let bytes = image_grid_ppm(&x, 2, 2).unwrap();
    let body = &bytes[b"P6\n4 4\n255\n".len()..];
    let px = |r: usize, c: usize| body[(r * 4 + c) * 3];
    assert_eq!([px(0, 0), px(0, 3), px(3, 0), px(3, 3)], [0, 85, 170, 255]);
}

#[test]
fn binary_record_vectors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.bin");
    std::fs::write(&path, [0u8; 1 + 3 * 2 * 2]).unwrap();
    let set = load_binary_records(&path, [3, 2, 2], 1, 10, Split::Test).unwrap();
    assert_eq!(set.labels.data(), &[1., 0., 0., 0., 0., 0., 0., 0., 0., 0.]);
    assert!(set.images.data().iter().all(|&v| v == -1.0));

    let mut rec = vec![3u8];
    rec.extend([255u8, 0, 128, 51]);
    std::fs::write(&path, &rec).unwrap();
    let set = load_binary_records(&path, [1, 2, 2], 1, 4, Split::Train).unwrap();
    assert_eq!(set.labels.data(), &[0., 0., 0., 1.]);
    assert_eq!(set.images.data()[0], 1.0);
    assert_eq!(set.images.data()[1], -1.0);
    assert_eq!(set.images.data()[3], (2.0 * (51.0 / 255.0) - 1.0) as f32);

    std::fs::write(&path, [0u8; 7]).unwrap();
    assert_eq!(load_binary_records(&path, [1, 2, 2], 1, 4, Split::Train).unwrap_err().kind(), "data");
    std::fs::write(&path, []).unwrap();
    assert_eq!(load_binary_records(&path, [1, 2, 2], 1, 4, Split::Train).unwrap_err().kind(), "data");
}

#[test]
fn binary_records_round_trip_within_quantization() {
    let mut rng = Rng::new(3);
    let n = 20;
    let images: Vec<f64> = (0..n * 3 * 4 * 4).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let mut labels = vec![0.0; n * 2 * 5];
    for i in 0..n * 2 {
        labels[i * 5 + rng.below(5)] = 1.0;
    }
    let set = LabeledImageSet::new(
        Tensor::from_f64(vec![n, 3, 4, 4], &images).unwrap(),
        Tensor::from_f64(vec![n, 10], &labels).unwrap(),
        Split::Valid,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("set.bin");
    std::fs::write(&path, encode_binary_records(&set, 5).unwrap()).unwrap();
    let back = load_binary_records(&path, [3, 4, 4], 2, 5, Split::Valid).unwrap();
    assert_eq!(back.labels, set.labels);
    for (a, b) in set.images.data().iter().zip(back.images.data()) {
        assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6, "{a} vs {b}");
    }
}

#[test]
fn scale_and_crop_geometry() {
    let (h, w) = (78, 64);
    let data: Vec<f64> = (0..h * w).map(|i| (i / w) as f64 / 100.0 - 0.5).collect();
    let x = Tensor::<f32>::from_f64(vec![1, 1, h, w], &data).unwrap();
    let out = scale_and_crop(&x, [78, 64], [64, 64]).unwrap();
    assert_eq!(out.shape(), &[1, 1, 64, 64]);
    for r in 0..64 {
        assert_eq!(out.data()[r * 64], x.data()[(r + 7) * 64], "row {r}");
    }
    assert_eq!(scale_and_crop(&x, [78, 64], [78, 64]).unwrap(), x);
    let c = Tensor::<f32>::from_f64(vec![2, 3, 10, 12], &vec![0.25; 720]).unwrap();
    let out = scale_and_crop(&c, [15, 9], [8, 8]).unwrap();
    assert!(out.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    assert_eq!(scale_and_crop(&c, [6, 6], [8, 8]).unwrap_err().kind(), "invalid_argument");
}

fn endpoints<T: Scalar>() {
    let arch = tiny_arch();
    let b = ModelBundle::<T>::init(&arch, &mut Rng::new(4)).unwrap();
    let spec = ShapeSpec {
        canvas: 16,
        channels: 1,
        ..ShapeSpec::default()
    };
    let set = generate_shapes(&spec, Split::Test).unwrap();
    let x = scale_and_crop(&set.images.select_rows(&[0, 1]), [8, 8], [8, 8]).unwrap().cast::<T>();
    let (xa, xb) = (x.select_rows(&[0]), x.select_rows(&[1]));
    for steps in [2, 5, 8] {
        let frames = interpolate(&b, &xa, &xb, steps).unwrap();
        let ra = reconstruct(&b, &xa, &mut Rng::new(0), true).unwrap();
        let rb = reconstruct(&b, &xb, &mut Rng::new(0), true).unwrap();
        assert_eq!(frames.select_rows(&[0]), ra);
        assert_eq!(frames.select_rows(&[steps - 1]), rb);
        assert_ne!(ra, rb);
    }
}

#[test]
fn interpolation_endpoints_are_mean_reconstructions() {
    endpoints::<f32>();
    endpoints::<f64>();
}
