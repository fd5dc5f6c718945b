//! Fixed 256-entry heat colormap.
//!
//! Piecewise-linear ramp through eight anchors, from near-black at index 0
//! through purple, red and orange to pale yellow at 255:
//!
//! | position | RGB |
//! |---|---|
//! | 0.0 | 0, 0, 4 |
//! | 0.15 | 40, 11, 84 |
//! | 0.35 | 120, 28, 109 |
//! | 0.5 | 165, 44, 96 |
//! | 0.65 | 212, 72, 66 |
//! | 0.8 | 245, 125, 21 |
//! | 0.92 | 250, 193, 39 |
//! | 1.0 | 252, 255, 164 |
//!
//! Values in `[0, 1]` map to index `round(255 · v)`.

pub const COLORMAP: [[u8; 3]; 256] = [
    [0, 0, 4],
    [1, 0, 6],
    [2, 1, 8],
    [3, 1, 10],
    [4, 1, 12],
    [5, 1, 14],
    [6, 2, 17],
    [7, 2, 19],
    [8, 2, 21],
    [9, 3, 23],
    [10, 3, 25],
    [12, 3, 27],
    [13, 3, 29],
    [14, 4, 31],
    [15, 4, 33],
    [16, 4, 35],
    [17, 5, 37],
    [18, 5, 40],
    [19, 5, 42],
    [20, 5, 44],
    [21, 6, 46],
    [22, 6, 48],
    [23, 6, 50],
    [24, 7, 52],
    [25, 7, 54],
    [26, 7, 56],
    [27, 7, 58],
    [28, 8, 60],
    [29, 8, 63],
    [30, 8, 65],
    [31, 9, 67],
    [32, 9, 69],
    [33, 9, 71],
    [35, 9, 73],
    [36, 10, 75],
    [37, 10, 77],
    [38, 10, 79],
    [39, 11, 81],
    [40, 11, 83],
    [41, 11, 84],
    [43, 12, 85],
    [44, 12, 85],
    [46, 12, 86],
    [47, 13, 86],
    [49, 13, 87],
    [51, 13, 87],
    [52, 14, 88],
    [54, 14, 88],
    [55, 14, 89],
    [57, 15, 89],
    [58, 15, 90],
    [60, 15, 90],
    [62, 16, 91],
    [63, 16, 91],
    [65, 16, 92],
    [66, 17, 92],
    [68, 17, 93],
    [69, 17, 93],
    [71, 18, 94],
    [73, 18, 94],
    [74, 18, 95],
    [76, 19, 95],
    [77, 19, 96],
    [79, 19, 96],
    [80, 20, 97],
    [82, 20, 97],
    [84, 20, 98],
    [85, 21, 98],
    [87, 21, 99],
    [88, 21, 99],
    [90, 22, 100],
    [91, 22, 100],
    [93, 22, 101],
    [95, 23, 101],
    [96, 23, 102],
    [98, 23, 102],
    [99, 24, 103],
    [101, 24, 103],
    [102, 24, 103],
    [104, 25, 104],
    [105, 25, 104],
    [107, 25, 105],
    [109, 26, 105],
    [110, 26, 106],
    [112, 26, 106],
    [113, 27, 107],
    [115, 27, 107],
    [116, 27, 108],
    [118, 28, 108],
    [120, 28, 109],
    [121, 28, 109],
    [122, 29, 108],
    [123, 29, 108],
    [124, 30, 108],
    [126, 30, 107],
    [127, 30, 107],
    [128, 31, 107],
    [129, 31, 106],
    [130, 32, 106],
    [131, 32, 106],
    [133, 32, 105],
    [134, 33, 105],
    [135, 33, 105],
    [136, 34, 104],
    [137, 34, 104],
    [139, 35, 104],
    [140, 35, 103],
    [141, 35, 103],
    [142, 36, 103],
    [143, 36, 102],
    [144, 37, 102],
    [146, 37, 102],
    [147, 38, 101],
    [148, 38, 101],
    [149, 38, 101],
    [150, 39, 100],
    [151, 39, 100],
    [153, 40, 100],
    [154, 40, 99],
    [155, 40, 99],
    [156, 41, 99],
    [157, 41, 98],
    [159, 42, 98],
    [160, 42, 98],
    [161, 43, 97],
    [162, 43, 97],
    [163, 43, 97],
    [164, 44, 96],
    [166, 44, 96],
    [167, 45, 95],
    [168, 46, 94],
    [169, 47, 93],
    [171, 47, 92],
    [172, 48, 92],
    [173, 49, 91],
    [174, 49, 90],
    [175, 50, 89],
    [177, 51, 89],
    [178, 52, 88],
    [179, 52, 87],
    [180, 53, 86],
    [182, 54, 85],
    [183, 55, 85],
    [184, 55, 84],
    [185, 56, 83],
    [187, 57, 82],
    [188, 58, 81],
    [189, 58, 81],
    [190, 59, 80],
    [191, 60, 79],
    [193, 60, 78],
    [194, 61, 78],
    [195, 62, 77],
    [196, 63, 76],
    [198, 63, 75],
    [199, 64, 74],
    [200, 65, 74],
    [201, 66, 73],
    [202, 66, 72],
    [204, 67, 71],
    [205, 68, 71],
    [206, 69, 70],
    [207, 69, 69],
    [209, 70, 68],
    [210, 71, 67],
    [211, 71, 67],
    [212, 72, 66],
    [213, 74, 65],
    [214, 75, 63],
    [215, 77, 62],
    [216, 78, 61],
    [217, 79, 60],
    [217, 81, 59],
    [218, 82, 57],
    [219, 83, 56],
    [220, 85, 55],
    [221, 86, 54],
    [222, 88, 53],
    [223, 89, 52],
    [223, 90, 50],
    [224, 92, 49],
    [225, 93, 48],
    [226, 95, 47],
    [227, 96, 46],
    [228, 97, 45],
    [229, 99, 43],
    [229, 100, 42],
    [230, 101, 41],
    [231, 103, 40],
    [232, 104, 39],
    [233, 106, 37],
    [234, 107, 36],
    [235, 108, 35],
    [236, 110, 34],
    [236, 111, 33],
    [237, 113, 32],
    [238, 114, 30],
    [239, 115, 29],
    [240, 117, 28],
    [241, 118, 27],
    [242, 119, 26],
    [242, 121, 25],
    [243, 122, 23],
    [244, 124, 22],
    [245, 125, 21],
    [245, 127, 22],
    [245, 129, 22],
    [245, 132, 23],
    [246, 134, 23],
    [246, 136, 24],
    [246, 138, 25],
    [246, 141, 25],
    [246, 143, 26],
    [246, 145, 26],
    [247, 147, 27],
    [247, 149, 27],
    [247, 152, 28],
    [247, 154, 29],
    [247, 156, 29],
    [247, 158, 30],
    [248, 161, 30],
    [248, 163, 31],
    [248, 165, 32],
    [248, 167, 32],
    [248, 169, 33],
    [248, 172, 33],
    [249, 174, 34],
    [249, 176, 35],
    [249, 178, 35],
    [249, 181, 36],
    [249, 183, 36],
    [249, 185, 37],
    [250, 187, 37],
    [250, 189, 38],
    [250, 192, 39],
    [250, 194, 41],
    [250, 197, 48],
    [250, 200, 54],
    [250, 203, 60],
    [250, 206, 66],
    [251, 209, 72],
    [251, 212, 78],
    [251, 215, 84],
    [251, 219, 90],
    [251, 222, 97],
    [251, 225, 103],
    [251, 228, 109],
    [251, 231, 115],
    [251, 234, 121],
    [251, 237, 127],
    [252, 240, 133],
    [252, 243, 139],
    [252, 246, 146],
    [252, 249, 152],
    [252, 252, 158],
    [252, 255, 164],
];

/// Colour of a value clamped to `[0, 1]`; NaN maps to index 0.
pub fn color(v: f64) -> [u8; 3] {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    COLORMAP[(v * 255.0).round() as usize]
}
