#![allow(dead_code)]

use fossilnet::data::{Manifest, Record, Source, CLASS_NAMES};

/// Train, validation, test and total per class, as printed in the dataset table.
pub const EXPECTED_SPLIT: [[usize; 4]; 22] = [
    [1037, 195, 64, 1296],
    [993, 186, 62, 1241],
    [1011, 189, 63, 1263],
    [1162, 218, 72, 1452],
    [1036, 194, 64, 1294],
    [982, 184, 61, 1227],
    [1129, 212, 70, 1411],
    [1039, 195, 64, 1298],
    [1317, 247, 82, 1646],
    [1023, 192, 63, 1278],
    [1260, 237, 78, 1575],
    [1260, 236, 78, 1574],
    [1135, 213, 70, 1418],
    [1218, 228, 76, 1522],
    [1168, 219, 73, 1460],
    [1288, 242, 80, 1610],
    [996, 186, 62, 1244],
    [1259, 236, 78, 1573],
    [1223, 229, 76, 1528],
    [1025, 192, 64, 1281],
    [998, 187, 62, 1247],
    [1102, 207, 68, 1377],
];

pub const EXPECTED_TOTALS: [usize; 4] = [24661, 4624, 1530, 30815];

/// A manifest with `sizes[c]` records of class `c`, interleaved across
/// classes so records of one class are not contiguous.
pub fn synthetic_manifest(sizes: &[usize]) -> Manifest {
    let mut records = Vec::new();
    let max = sizes.iter().copied().max().unwrap_or(0);
    for i in 0..max {
        for (c, &n) in sizes.iter().enumerate() {
            if i < n {
                records.push(Record {
                    path: format!("{}/{i:05}.ppm", CLASS_NAMES[c]),
                    label: CLASS_NAMES[c].to_string(),
                    source: if i % 3 == 0 {
                        Source::Literature
                    } else {
                        Source::Own
                    },
                });
            }
        }
    }
    Manifest::new(records, ".").unwrap()
}
