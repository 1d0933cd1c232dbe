/// `[x1, y1, x2, y2]`.
pub type Box4 = [f64; 4];

pub fn area(b: &Box4) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

pub fn intersection(a: &Box4, b: &Box4) -> f64 {
    let w = a[2].min(b[2]) - a[0].max(b[0]);
    let h = a[3].min(b[3]) - a[1].max(b[1]);
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h
    }
}

pub fn iou(a: &Box4, b: &Box4) -> f64 {
    let i = intersection(a, b);
    let u = area(a) + area(b) - i;
    if u <= 0.0 {
        0.0
    } else {
        i / u
    }
}

pub fn giou(a: &Box4, b: &Box4) -> f64 {
    let i = intersection(a, b);
    let u = area(a) + area(b) - i;
    let hull = [a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])];
    let c = area(&hull);
    i / u - (c - u) / c
}
