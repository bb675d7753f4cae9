use consolidate::importance::{estimate, Method};
use consolidate::metrics::AccuracyMatrix;
use consolidate::network::{Architecture, Network};
use consolidate::scenario::idx::{parse_images, parse_labels};
use consolidate::scenario::{load_idx, write_idx_images, write_idx_labels};
use consolidate::{Error, Execution, ImportanceMap, Sample, Tensor1};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn idx_round_trip(rows in 1usize..5, cols in 1usize..5, labels in prop::collection::vec(0u8..10, 1..20), seed in any::<u8>()) {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
        let pixels: Vec<u8> = (0..labels.len() * rows * cols).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        write_idx_images(&ip, rows, cols, &pixels).unwrap();
        write_idx_labels(&lp, &labels).unwrap();
        let raw = load_idx(&ip, &lp, false).unwrap();
        prop_assert_eq!(raw.len(), labels.len());
        prop_assert_eq!(raw.feature_dim(), rows * cols);
        for (i, s) in raw.samples().iter().enumerate() {
            prop_assert_eq!(s.label, labels[i] as usize);
            let back: Vec<u8> = s.features.as_slice().iter().map(|&v| v as u8).collect();
            prop_assert_eq!(&back[..], &pixels[i * rows * cols..(i + 1) * rows * cols]);
        }
        let norm = load_idx(&ip, &lp, true).unwrap();
        prop_assert!(norm.samples().iter().all(|s| s.features.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v))));
    }
}

#[test]
fn idx_errors_report_offsets() {
    let mut bytes = 0x0000_0801u32.to_be_bytes().to_vec();
    bytes.extend_from_slice(&[0; 12]);
    assert!(matches!(parse_images(&bytes), Err(Error::Format { offset: 0, .. })));

    let mut bytes = 0x0000_0803u32.to_be_bytes().to_vec();
    bytes.extend_from_slice(&2u32.to_be_bytes());
    assert!(matches!(parse_images(&bytes), Err(Error::Format { offset: 8, .. })));

    let mut bytes = 0x0000_0801u32.to_be_bytes().to_vec();
    bytes.extend_from_slice(&5u32.to_be_bytes());
    bytes.extend_from_slice(&[1, 2]);
    assert!(matches!(parse_labels(&bytes), Err(Error::Format { offset: 10, .. })));
}

#[test]
fn idx_count_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
    write_idx_images(&ip, 2, 2, &[0; 12]).unwrap();
    write_idx_labels(&lp, &[0, 1]).unwrap();
    assert!(load_idx(&ip, &lp, true).is_err());
    assert!(matches!(
        load_idx(&dir.path().join("missing"), &lp, true),
        Err(Error::Io { .. })
    ));
}

fn net(seed: u64) -> Network {
    let arch = Architecture {
        input_dim: 3,
        hidden: vec![4, 3],
        num_classes: 3,
        head_bias: true,
        head_init_scale: 0.5,
    };
    Network::init(&arch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn network_save_load_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.json");
    let a = net(1);
    a.save(&path).unwrap();
    let b = Network::load(&path).unwrap();
    assert_eq!(a, b);
    let x = Tensor1::new(vec![0.3, -1.2, 2.0]);
    assert_eq!(a.logits(&x).unwrap(), b.logits(&x).unwrap());
}

#[test]
fn importance_csv_round_trip() {
    let n = net(2);
    let data = vec![
        Sample { features: Tensor1::new(vec![1.0, 0.5, -0.5]), label: 2 },
        Sample { features: Tensor1::new(vec![-0.1, 0.2, 0.9]), label: 0 },
    ];
    let om = estimate(Method::EwcDr, &n, &data, Execution::Sequential).unwrap();
    let mut buf = Vec::new();
    om.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("block,row,col,value\n"));
    let back = ImportanceMap::read_csv(Method::EwcDr, 2, n.params(), &buf[..]).unwrap();
    assert_eq!(back, om);
}

#[test]
fn accuracy_matrix_csv_round_trip() {
    let m = AccuracyMatrix::from_rows(&[vec![97.5], vec![12.5, 95.0], vec![0.0, 3.25, 90.0]]).unwrap();
    let mut buf = Vec::new();
    m.write_csv(&mut buf).unwrap();
    let back = AccuracyMatrix::read_csv(&buf[..]).unwrap();
    for t in 1..=3 {
        for j in 1..=t {
            assert_eq!(back.get(t, j), m.get(t, j));
        }
    }
}
