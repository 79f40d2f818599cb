use std::path::Path;

use cnna::formats::*;
use cnna::tables::{BetaEntry, GridSpec};
use cnna_core::dse::{reference_grid, BetaConfig, DeviceProfile};
use cnna_core::fxp::{FixedPointFormat, FixedWord};
use cnna_core::model::{LayerKind, LayerWeights};
use cnna_core::synth::{random_floats, random_weights};
use cnna_core::tensor::Dims;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn toy_weights(format: FixedPointFormat, seed: u64) -> Vec<LayerWeights> {
    let model = load_model(&fixture("toy_model.json")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_weights(&mut rng, &model, format, 3.0, seed.is_multiple_of(2))
}

fn encode(w: &[LayerWeights]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_weights(&mut buf, w).unwrap();
    buf
}

fn raws(w: &[LayerWeights]) -> Vec<Vec<i32>> {
    w.iter()
        .map(|l| {
            std::iter::once(l.scale_word.raw())
                .chain(l.bias.iter().chain(&l.kernels).map(|x| x.raw()))
                .collect()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn weights_round_trip_bitwise(seed in any::<u64>(), i in 1u32..8, f in 0u32..24) {
        let format = FixedPointFormat::new(i, f).unwrap();
        let w = toy_weights(format, seed);
        let back = read_weights(&mut encode(&w).as_slice()).unwrap();
        prop_assert_eq!(raws(&w), raws(&back));
        for (a, b) in w.iter().zip(&back) {
            prop_assert_eq!((a.index, a.kind, a.filters, a.window, a.depth), (b.index, b.kind, b.filters, b.window, b.depth));
            prop_assert_eq!(a.format, b.format);
        }
    }
}

#[test]
fn header_layout() {
    let w = toy_weights(FixedPointFormat::Q2_6, 1);
    let buf = encode(&w);
    assert_eq!(&buf[..4], b"CNNA");
    assert_eq!(&buf[4..6], &1u16.to_le_bytes());
    assert_eq!(&buf[6..10], &[2, 6, 2, 6]);
    assert_eq!(&buf[10..14], &3u32.to_le_bytes());
    // index, kind, scale, dims[4], word count, then one byte per Q2.6 word
    assert_eq!(&buf[14..18], &0u32.to_le_bytes());
    assert_eq!(buf[18], LayerKind::Conv.code());
    assert_eq!(&buf[23..27], &4u32.to_le_bytes());
    let words = 4 * (1 + 3 * 3 * 2);
    assert_eq!(&buf[39..47], &(words as u64).to_le_bytes());
    assert_eq!(buf[47] as i8 as i32, w[0].bias[0].raw());
}

#[test]
fn corrupt_weight_files_are_rejected() {
    let w = toy_weights(FixedPointFormat::new(3, 10).unwrap(), 2);
    let buf = encode(&w);

    let mut bad = buf.clone();
    bad[..4].copy_from_slice(b"CNNX");
    let e = read_weights(&mut bad.as_slice()).unwrap_err();
    assert!(matches!(e, FormatError::BadMagic(_)));
    assert!(e.to_string().contains("bad magic"));

    let mut bad = buf.clone();
    bad[4] = 2;
    assert!(matches!(
        read_weights(&mut bad.as_slice()),
        Err(FormatError::Version(2))
    ));

    for cut in [3, 12, 30, buf.len() - 1] {
        assert!(
            matches!(read_weights(&mut &buf[..cut]), Err(FormatError::Truncated)),
            "cut at {cut}"
        );
    }

    let mut bad = buf.clone();
    bad.push(0);
    assert!(matches!(read_weights(&mut bad.as_slice()), Err(FormatError::Trailing)));

    // 13-bit words live in two bytes; 0x1000 is one past the largest raw value.
    let mut bad = buf.clone();
    bad[47..49].copy_from_slice(&0x1000u16.to_le_bytes());
    assert!(matches!(
        read_weights(&mut bad.as_slice()),
        Err(FormatError::WordOutOfRange { raw: 4096, .. })
    ));

    let mut bad = buf.clone();
    bad[18] = 9;
    assert!(matches!(read_weights(&mut bad.as_slice()), Err(FormatError::Kind(9))));

    let mut bad = buf;
    bad[39] ^= 1;
    assert!(matches!(
        read_weights(&mut bad.as_slice()),
        Err(FormatError::Layer { .. })
    ));
}

#[test]
fn float_fixture_parses_to_known_dims() {
    let model = load_model(&fixture("toy_model.json")).unwrap();
    assert_eq!(model.layers.len(), 4);
    assert_eq!(model.output_dims().unwrap(), Dims::vector(3));
    let floats = load_floats(&fixture("toy_floats.cnnf")).unwrap();
    let dims: Vec<_> = floats
        .iter()
        .map(|l| (l.index, l.kind, l.filters, l.window, l.depth))
        .collect();
    assert_eq!(
        dims,
        [
            (0, LayerKind::Conv, 4, 3, 2),
            (2, LayerKind::Conv, 6, 3, 4),
            (3, LayerKind::Dense, 3, 1, 24)
        ]
    );
    assert_eq!(floats[0].bias[0], -0.2f32 as f64);
    let image = load_image(&fixture("toy_image.bin"), model.input_dims()).unwrap();
    assert_eq!(image.data().len(), 128);
}

#[test]
fn floats_round_trip() {
    let model = load_model(&fixture("toy_model.json")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut floats = random_floats(&mut rng, &model, 1.0);
    for l in &mut floats {
        for v in l.bias.iter_mut().chain(&mut l.kernels) {
            *v = *v as f32 as f64;
        }
    }
    let mut buf = Vec::new();
    write_floats(&mut buf, &floats).unwrap();
    assert_eq!(&buf[..4], b"CNNF");
    assert_eq!(read_floats(&mut buf.as_slice()).unwrap(), floats);
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(
        read_floats(&mut bad.as_slice()),
        Err(FormatError::BadMagic(_))
    ));
}

#[test]
fn image_length_is_checked() {
    let e = decode_image(&[0; 12], Dims::square(2, 1)).unwrap_err();
    assert!(matches!(e, FormatError::ImageLength { expected: 4, got: 12 }));
    let t = decode_image(&[0, 0, 128, 63, 0, 0, 0, 191], Dims::vector(2)).unwrap();
    assert_eq!(t.data(), [1.0, -0.5]);
    assert_eq!(encode_image(&t), [0, 0, 128, 63, 0, 0, 0, 191]);
}

#[test]
fn model_spec_round_trip_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let model = load_model(&fixture("toy_model.json")).unwrap();
    let p = dir.path().join("m.json");
    save_model(&p, &model).unwrap();
    assert_eq!(load_model(&p).unwrap(), model);
    std::fs::write(
        &p,
        r#"{"name":"x","input":[4,5,1],"layers":[{"type":"conv","kernels":1,"window":3}]}"#,
    )
    .unwrap();
    assert!(matches!(load_model(&p), Err(cnna::Error::Model(_))));
    std::fs::write(
        &p,
        r#"{"name":"x","input":[4,4,1],"layers":[{"type":"conv","filters":1}]}"#,
    )
    .unwrap();
    assert!(matches!(load_model(&p), Err(cnna::Error::Json { .. })));
}

#[test]
fn weight_files_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("w.cnna");
    let w = toy_weights(FixedPointFormat::Q2_14, 4);
    save_weights(&p, &w).unwrap();
    assert_eq!(raws(&load_weights(&p).unwrap()), raws(&w));
    let e = load_weights(&dir.path().join("missing.cnna")).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    assert!(e.record().starts_with('{'));
}

#[test]
fn scale_words_keep_their_own_format() {
    let mut w = toy_weights(FixedPointFormat::Q2_14, 6);
    let sf = FixedPointFormat::new(4, 20).unwrap();
    for l in &mut w {
        l.scale_word = FixedWord::from_raw(-123_456, sf).unwrap();
    }
    let back = read_weights(&mut encode(&w).as_slice()).unwrap();
    assert!(back
        .iter()
        .all(|l| l.scale_word.format() == sf && l.scale_word.raw() == -123_456));
}

#[test]
fn bundled_configs_parse() {
    let grid: GridSpec = cnna::tables::load_json(&fixture("table1_grid.json")).unwrap();
    assert_eq!(grid.candidates(), reference_grid());
    let device: DeviceProfile = cnna::tables::load_json(&fixture("ultra96.json")).unwrap();
    assert_eq!(device, DeviceProfile::ultra96());
    let beta: BetaEntry = cnna::tables::load_json(&fixture("toy_beta.json")).unwrap();
    assert_eq!(BetaConfig::from(beta), BetaConfig::new(16, 4, 2, 2, 2));
    let f: GridSpec = serde_json::from_str(
        r#"{"data_size":[8,16],"pe_bw":[64],"pe_count":[4,8],"db_out":[1],"kernels_capacity":[10]}"#,
    )
    .unwrap();
    assert_eq!(f.candidates().len(), 4);
}
