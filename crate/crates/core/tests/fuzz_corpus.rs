//! Replays the checked-in fuzz corpora, plus simple mutations of every seed,
//! through the same checks the fuzz targets make.

use std::fs;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vig_core::bench::{read_csv, write_csv};
use vig_core::{ppm, weights};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let path = e.unwrap().path();
            (path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "empty corpus {target}");
    out
}

/// Truncations at every length for short inputs (a sample for long ones),
/// then random byte flips.
fn mutations(data: &[u8], seed: u64) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let step = (data.len() / 256).max(1);
    for n in (0..data.len()).step_by(step) {
        out.push(data[..n].to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..300 {
        let mut m = data.to_vec();
        if m.is_empty() {
            break;
        }
        for _ in 0..rng.random_range(1..4) {
            let i = rng.random_range(0..m.len());
            m[i] ^= 1 << rng.random_range(0..8);
        }
        out.push(m);
    }
    out
}

fn check_weights(data: &[u8]) -> bool {
    match weights::decode(data) {
        Ok((config, params)) => {
            assert_eq!(weights::encode(&config, &params).unwrap(), data);
            true
        }
        Err(_) => false,
    }
}

fn check_csv(data: &[u8]) -> bool {
    match read_csv(data) {
        Ok(rows) => {
            let mut once = Vec::new();
            write_csv(&mut once, &rows).unwrap();
            let mut twice = Vec::new();
            write_csv(&mut twice, &read_csv(&once[..]).unwrap()).unwrap();
            assert_eq!(once, twice);
            true
        }
        Err(_) => false,
    }
}

fn check_ppm(data: &[u8]) -> bool {
    match ppm::decode(data) {
        Ok(img) => {
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let bytes = ppm::encode(&img).unwrap();
            assert_eq!(ppm::encode(&ppm::decode(&bytes).unwrap()).unwrap(), bytes);
            true
        }
        Err(_) => false,
    }
}

fn replay(target: &str, check: fn(&[u8]) -> bool) {
    for (i, (name, data)) in seeds(target).into_iter().enumerate() {
        assert!(check(&data), "seed {name} is rejected");
        for m in mutations(&data, i as u64) {
            check(&m);
        }
    }
}

#[test]
fn weights_corpus() {
    replay("weights_decode", check_weights);
}

#[test]
fn cost_csv_corpus() {
    replay("cost_csv_parse", check_csv);
}

#[test]
fn ppm_corpus() {
    replay("ppm_decode", check_ppm);
}
