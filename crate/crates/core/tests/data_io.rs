use std::fs;

use lcfed_core::data::{self, benchmark, by_site, load_directory, write_directory, write_pgm, BenchmarkSpec};
use lcfed_core::Error;

fn spec() -> BenchmarkSpec {
    BenchmarkSpec {
        sites: 2,
        samples_per_site: 5,
        size: (16, 16),
        classes: 2,
        seed: 4,
    }
}

#[test]
fn directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let sites = benchmark(&spec()).unwrap();
    let manifest = write_directory(dir.path(), &sites).unwrap();
    let loaded = by_site(load_directory(&manifest, 2).unwrap(), 2).unwrap();
    assert_eq!(loaded.len(), 2);
    for (a, b) in sites.iter().zip(&loaded) {
        assert_eq!(a.train.len(), b.train.len());
        assert_eq!(a.test.len(), b.test.len());
        for (x, y) in a.all().zip(b.all()) {
            assert_eq!(x.mask, y.mask);
            assert_eq!((x.site, x.split), (y.site, y.split));
            let err = x
                .image
                .data()
                .iter()
                .zip(y.image.data())
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max);
            assert!(err <= 0.5 / 65535.0 + 1e-12, "image error {err}");
        }
    }
}

#[test]
fn eight_bit_images_scale_to_unit_range() {
    let dir = tempfile::tempdir().unwrap();
    write_pgm(&dir.path().join("i.pgm"), 2, 1, 255, &[0, 255]).unwrap();
    write_pgm(&dir.path().join("m.pgm"), 2, 1, 255, &[0, 200]).unwrap();
    fs::write(dir.path().join("m.txt"), "# one sample\n0 train i.pgm m.pgm\n").unwrap();
    let s = load_directory(&dir.path().join("m.txt"), 1).unwrap();
    assert_eq!(s[0].image.data(), &[0.0, 1.0]);
    assert_eq!(s[0].mask.data(), &[0.0, 1.0]);
}

#[test]
fn mismatched_mask_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    write_pgm(&dir.path().join("i.pgm"), 4, 4, 255, &[0; 16]).unwrap();
    write_pgm(&dir.path().join("bad_mask.pgm"), 3, 4, 255, &[0; 12]).unwrap();
    fs::write(dir.path().join("m.txt"), "0 test i.pgm bad_mask.pgm\n").unwrap();
    let err = load_directory(&dir.path().join("m.txt"), 1).unwrap_err();
    assert!(matches!(err, Error::File { .. }));
    assert!(err.to_string().contains("bad_mask.pgm"), "{err}");
}

#[test]
fn missing_and_malformed_inputs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_directory(&dir.path().join("absent.txt"), 1).unwrap_err();
    assert!(err.to_string().contains("absent.txt"));
    fs::write(dir.path().join("m.txt"), "0 train only_three\n").unwrap();
    assert!(matches!(load_directory(&dir.path().join("m.txt"), 1), Err(Error::Config(_))));
    fs::write(dir.path().join("m.txt"), "0 validation a.pgm b.pgm\n").unwrap();
    assert!(load_directory(&dir.path().join("m.txt"), 1).is_err());
    fs::write(dir.path().join("junk.pgm"), b"not an image").unwrap();
    fs::write(dir.path().join("m.txt"), "0 train junk.pgm junk.pgm\n").unwrap();
    let err = load_directory(&dir.path().join("m.txt"), 1).unwrap_err();
    assert!(err.to_string().contains("junk.pgm"), "{err}");
}

#[test]
fn samples_of_unknown_sites_are_rejected() {
    let sites = benchmark(&spec()).unwrap();
    let all: Vec<data::Sample> = sites.iter().flat_map(|s| s.all().cloned()).collect();
    assert!(by_site(all, 1).is_err());
}
