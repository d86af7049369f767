use gantts_core::audio::*;
use gantts_tensor::Rng;
use proptest::prelude::*;

#[test]
fn roundtrip_on_a_dense_grid() {
    for mu in [MU_8BIT, MU_16BIT] {
        let law = MuLaw::new(mu).unwrap();
        let worst = (0..=10_000)
            .map(|i| -1.0 + 2.0 * i as f64 / 10_000.0)
            .map(|x| (law.decode(law.encode(x).unwrap()).unwrap() - x).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-9, "mu={mu}: {worst}");
    }
}

#[test]
fn default_is_sixteen_bit() {
    let x = 0.3;
    assert_eq!(mulaw(x).unwrap(), MuLaw::new(MU_16BIT).unwrap().encode(x).unwrap());
    let oracle = (1.0 + 65535.0 * x).ln() / 65536f64.ln();
    assert!((mulaw(x).unwrap() - oracle).abs() < 1e-15);
}

#[test]
fn wav_roundtrip_at_sample_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.wav");
    let mut rng = Rng::new(1);
    let values: Vec<f64> = (0..1000).map(|_| 2.2 * rng.uniform() - 1.1).collect();
    let clip = WavClip::from_real(SAMPLE_RATE, &values);
    write_wav(&path, &clip).unwrap();
    let back = read_wav(&path).unwrap();
    assert_eq!(back, clip);
    for (x, y) in values.iter().zip(back.to_real()) {
        assert!((x.clamp(-1.0, 1.0) - y).abs() <= 0.5 / 32767.0 + 1e-15);
    }
    // A canonical 44-byte PCM header precedes the payload.
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 44 + 2000);
}

#[test]
fn silence_roundtrips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.wav");
    let clip = WavClip::from_real(SAMPLE_RATE, &[0.0; 64]);
    write_wav(&path, &clip).unwrap();
    assert!(read_wav(&path).unwrap().samples.iter().all(|&s| s == 0));
}

#[test]
fn malformed_and_unsupported_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.wav");
    std::fs::write(&junk, b"RIFF0000WAVEnope").unwrap();
    assert!(read_wav(&junk).is_err());
    let stereo = dir.path().join("stereo.wav");
    let spec = hound::WavSpec {
        channels: 2,
        sample_rate: 8000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
    w.write_sample(0i16).unwrap();
    w.write_sample(0i16).unwrap();
    w.finalize().unwrap();
    assert!(read_wav(&stereo).is_err());
    assert!(read_wav(&dir.path().join("missing.wav")).is_err());
}

proptest! {
    #[test]
    fn mulaw_is_odd_and_strictly_increasing(mut xs in prop::collection::vec(-1.0f64..=1.0, 2..50)) {
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        let ys: Vec<f64> = xs.iter().map(|&x| mulaw(x).unwrap()).collect();
        for w in ys.windows(2) {
            prop_assert!(w[0] < w[1]);
        }
        for &x in &xs {
            prop_assert_eq!(mulaw(-x).unwrap(), -mulaw(x).unwrap());
            prop_assert!(mulaw(x).unwrap().abs() <= 1.0);
        }
    }
}
