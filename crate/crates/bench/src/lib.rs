//! Fixtures shared by the benchmarks in `benches/`.

use airlock_core::testkit::{bundle_zip, small_resources};

/// A bundle with `files` source files of `file_bytes` bytes each.
pub fn bundle_of(files: usize, file_bytes: usize) -> Vec<u8> {
    let bodies: Vec<(String, Vec<u8>)> = (0..files)
        .map(|i| (format!("src/mod_{i:03}.py"), (0..file_bytes).map(|j| b'a' + ((i + j) % 26) as u8).collect()))
        .collect();
    let mut entries: Vec<(&str, &[u8])> = bodies.iter().map(|(p, b)| (p.as_str(), b.as_slice())).collect();
    entries.push(("main.py", b"print('hello')\n"));
    bundle_zip(&entries, "main.py", "python3-datasci", "cohort", small_resources(30))
}

/// CSV-like dataset bytes of roughly `rows` lines.
pub fn dataset(rows: usize) -> Vec<u8> {
    (0..rows).flat_map(|i| format!("row-{i:06},{},{}\n", i % 7, i * 31 % 101).into_bytes()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_valid() {
        let archive = bundle_of(4, 100);
        assert!(airlock_core::archive::canonical_hash(&archive).is_ok());
        assert_eq!(dataset(3).iter().filter(|b| **b == b'\n').count(), 3);
    }
}
