//! Rectangle mathematics in normalized image coordinates.
//!
//! The canonical parameterization is center/size (`cx, cy, w, h`), all in
//! `[0, 1]` for proper boxes. The same type carries regression offsets, whose
//! components may be negative or exceed one.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest width or height a clamped box may have.
pub const MIN_SIZE: f64 = 1e-4;

const VALID_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoxError {
    #[error("union_box requires at least one box")]
    EmptyUnion,
    #[error("mosaic grid must be 1, 2 or 3, got {0}")]
    InvalidGrid(usize),
    #[error("mosaic cell ({row}, {col}) out of range for a {grid}x{grid} grid")]
    CellOutOfRange { row: usize, col: usize, grid: usize },
}

/// Axis-aligned box, `[cx, cy, w, h]` on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Input coordinate convention for boxes read from files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxFormat {
    #[default]
    Cxcywh,
    Xyxy,
}

impl BoxFormat {
    pub fn decode(self, v: [f64; 4]) -> BBox {
        match self {
            BoxFormat::Cxcywh => BBox::from(v),
            BoxFormat::Xyxy => BBox::from_corners(v[0], v[1], v[2], v[3]),
        }
    }
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub const FULL: BBox = BBox::new(0.5, 0.5, 1.0, 1.0);

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn x1(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn x2(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y2(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> [f64; 4] {
        [self.x1(), self.y1(), self.x2(), self.y2()]
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Non-negative size and corners inside the unit square (up to rounding).
    pub fn is_valid(&self) -> bool {
        let [x1, y1, x2, y2] = self.corners();
        self.cx.is_finite()
            && self.cy.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w >= 0.0
            && self.h >= 0.0
            && x1 >= -VALID_TOL
            && y1 >= -VALID_TOL
            && x2 <= 1.0 + VALID_TOL
            && y2 <= 1.0 + VALID_TOL
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1() && x <= self.x2() && y >= self.y1() && y <= self.y2()
    }

    /// Whether `other` lies inside `self` (tolerant to rounding).
    pub fn contains(&self, other: &BBox) -> bool {
        other.x1() >= self.x1() - VALID_TOL
            && other.y1() >= self.y1() - VALID_TOL
            && other.x2() <= self.x2() + VALID_TOL
            && other.y2() <= self.y2() + VALID_TOL
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.x2().min(other.x2()) - self.x1().max(other.x1());
        let ih = self.y2().min(other.y2()) - self.y1().max(other.y1());
        iw.max(0.0) * ih.max(0.0)
    }

    /// Clamps into the unit square, flooring width and height at [`MIN_SIZE`].
    pub fn clamped(&self) -> BBox {
        clamp_with_jacobian(self.to_array()).0.into()
    }

    pub fn flip_horizontal(&self) -> BBox {
        BBox::new(1.0 - self.cx, self.cy, self.w, self.h)
    }

    pub fn max_abs_diff(&self, other: &BBox) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Area from corners, so that a box intersected with itself gives it exactly.
fn corner_area(b: &BBox) -> f64 {
    (b.x2() - b.x1()).max(0.0) * (b.y2() - b.y1()).max(0.0)
}

/// Intersection over union; zero when the union has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = corner_area(a) + corner_area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `iou - |hull \ (a ∪ b)| / |hull|`.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = corner_area(a) + corner_area(b) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    let hull_w = a.x2().max(b.x2()) - a.x1().min(b.x1());
    let hull_h = a.y2().max(b.y2()) - a.y1().min(b.y1());
    let hull = hull_w.max(0.0) * hull_h.max(0.0);
    if hull <= 0.0 {
        return 0.0;
    }
    inter / union - (hull - union) / hull
}

/// GIoU of `a` against a fixed `b`, with its gradient with respect to `a`'s
/// `[cx, cy, w, h]`. Degenerate unions or hulls give zero value and gradient.
pub fn giou_with_grad(a: &BBox, b: &BBox) -> (f64, [f64; 4]) {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let (aw, ah) = ((ax2 - ax1).max(0.0), (ay2 - ay1).max(0.0));
    let iw = ax2.min(bx2) - ax1.max(bx1);
    let ih = ay2.min(by2) - ay1.max(by1);
    let (iwp, ihp) = (iw.max(0.0), ih.max(0.0));
    let inter = iwp * ihp;
    let union = aw * ah + corner_area(b) - inter;
    let cw = ax2.max(bx2) - ax1.min(bx1);
    let ch = ay2.max(by2) - ay1.min(by1);
    let hull = cw.max(0.0) * ch.max(0.0);
    if union <= 0.0 || hull <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let value = inter / union - (hull - union) / hull;

    // derivatives with respect to the corners (x1, y1, x2, y2)
    let overlap = iw > 0.0 && ih > 0.0;
    let d_iw = [
        if overlap && ax1 > bx1 { -1.0 } else { 0.0 },
        if overlap && ax2 < bx2 { 1.0 } else { 0.0 },
    ];
    let d_ih = [
        if overlap && ay1 > by1 { -1.0 } else { 0.0 },
        if overlap && ay2 < by2 { 1.0 } else { 0.0 },
    ];
    let d_inter = [d_iw[0] * ihp, d_ih[0] * iwp, d_iw[1] * ihp, d_ih[1] * iwp];
    let d_area = [-ah, -aw, ah, aw];
    let d_cw = [if ax1 < bx1 { -1.0 } else { 0.0 }, if ax2 > bx2 { 1.0 } else { 0.0 }];
    let d_ch = [if ay1 < by1 { -1.0 } else { 0.0 }, if ay2 > by2 { 1.0 } else { 0.0 }];
    let d_hull = [d_cw[0] * ch, d_ch[0] * cw, d_cw[1] * ch, d_ch[1] * cw];
    let mut dc = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter[k];
        dc[k] = (d_inter[k] * union - inter * d_union) / (union * union)
            + (d_union * hull - union * d_hull[k]) / (hull * hull);
    }
    let grad = [
        dc[0] + dc[2],
        dc[1] + dc[3],
        (dc[2] - dc[0]) / 2.0,
        (dc[3] - dc[1]) / 2.0,
    ];
    (value, grad)
}

/// Smallest box containing every input.
pub fn union_box(boxes: &[BBox]) -> Result<BBox, BoxError> {
    let first = boxes.first().ok_or(BoxError::EmptyUnion)?;
    let mut acc = first.corners();
    for b in &boxes[1..] {
        let c = b.corners();
        acc[0] = acc[0].min(c[0]);
        acc[1] = acc[1].min(c[1]);
        acc[2] = acc[2].max(c[2]);
        acc[3] = acc[3].max(c[3]);
    }
    Ok(BBox::from_corners(acc[0], acc[1], acc[2], acc[3]))
}

/// Elementwise sum in cxcywh followed by [`BBox::clamped`].
pub fn apply_offset(base: &BBox, offset: &BBox) -> BBox {
    BBox::new(
        base.cx + offset.cx,
        base.cy + offset.cy,
        base.w + offset.w,
        base.h + offset.h,
    )
    .clamped()
}

/// Clamps a cxcywh 4-vector and returns the Jacobian of the (piecewise
/// linear) map, row-major `out x in`.
pub fn clamp_with_jacobian(v: [f64; 4]) -> ([f64; 4], [[f64; 4]; 4]) {
    let (cx, w, jx) = clamp_axis(v[0], v[2]);
    let (cy, h, jy) = clamp_axis(v[1], v[3]);
    let mut jac = [[0.0; 4]; 4];
    // x axis: (cx, w) <- (v0, v2); y axis: (cy, h) <- (v1, v3)
    jac[0][0] = jx[0][0];
    jac[0][2] = jx[0][1];
    jac[2][0] = jx[1][0];
    jac[2][2] = jx[1][1];
    jac[1][1] = jy[0][0];
    jac[1][3] = jy[0][1];
    jac[3][1] = jy[1][0];
    jac[3][3] = jy[1][1];
    ([cx, cy, w, h], jac)
}

/// One axis of the clamp. Returns `(center, extent, d(center, extent)/d(c, e))`.
fn clamp_axis(c: f64, e: f64) -> (f64, f64, [[f64; 2]; 2]) {
    // interior boxes pass through bit-exactly
    if e > MIN_SIZE && c - e / 2.0 > 0.0 && c + e / 2.0 < 1.0 {
        return (c, e, [[1.0, 0.0], [0.0, 1.0]]);
    }
    let (e1, de1) = if e > MIN_SIZE { (e, 1.0) } else { (MIN_SIZE, 0.0) };
    let mut lo = c - e1 / 2.0;
    let mut hi = c + e1 / 2.0;
    let mut dlo = [1.0, -de1 / 2.0];
    let mut dhi = [1.0, de1 / 2.0];
    for (x, dx) in [(&mut lo, &mut dlo), (&mut hi, &mut dhi)] {
        if *x <= 0.0 {
            *x = 0.0;
            *dx = [0.0, 0.0];
        } else if *x >= 1.0 {
            *x = 1.0;
            *dx = [0.0, 0.0];
        }
    }
    if hi - lo < MIN_SIZE {
        if lo >= 1.0 - MIN_SIZE {
            lo = 1.0 - MIN_SIZE;
            hi = 1.0;
            dlo = [0.0, 0.0];
            dhi = [0.0, 0.0];
        } else {
            hi = lo + MIN_SIZE;
            dhi = dlo;
        }
    }
    let center = (lo + hi) / 2.0;
    let extent = hi - lo;
    let jac = [
        [(dlo[0] + dhi[0]) / 2.0, (dlo[1] + dhi[1]) / 2.0],
        [dhi[0] - dlo[0], dhi[1] - dlo[1]],
    ];
    (center, extent, jac)
}

/// A 1x1, 2x2 or 3x3 mosaic with one cell designated as the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MosaicLayout {
    grid: usize,
    target: (usize, usize),
}

impl MosaicLayout {
    pub fn new(grid: usize, target: (usize, usize)) -> Result<Self, BoxError> {
        if !(1..=3).contains(&grid) {
            return Err(BoxError::InvalidGrid(grid));
        }
        let layout = MosaicLayout { grid, target };
        layout.check_cell(target)?;
        Ok(layout)
    }

    pub fn single() -> Self {
        MosaicLayout { grid: 1, target: (0, 0) }
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn target(&self) -> (usize, usize) {
        self.target
    }

    /// Cells in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> {
        let g = self.grid;
        (0..g).flat_map(move |r| (0..g).map(move |c| (r, c)))
    }

    fn check_cell(&self, (row, col): (usize, usize)) -> Result<(), BoxError> {
        if row >= self.grid || col >= self.grid {
            return Err(BoxError::CellOutOfRange {
                row,
                col,
                grid: self.grid,
            });
        }
        Ok(())
    }

    /// Extent of a cell in global canvas coordinates.
    pub fn cell_region(&self, cell: (usize, usize)) -> Result<BBox, BoxError> {
        self.to_global(cell, &BBox::FULL)
    }

    pub fn target_region(&self) -> BBox {
        self.cell_region(self.target)
            .expect("target cell validated at construction")
    }

    /// Maps a box from cell-local normalized coordinates onto the canvas.
    pub fn to_global(&self, cell: (usize, usize), b: &BBox) -> Result<BBox, BoxError> {
        self.check_cell(cell)?;
        let g = self.grid as f64;
        let (row, col) = (cell.0 as f64, cell.1 as f64);
        Ok(BBox::new(
            (col + b.cx) / g,
            (row + b.cy) / g,
            b.w / g,
            b.h / g,
        ))
    }

    pub fn from_global(&self, cell: (usize, usize), b: &BBox) -> Result<BBox, BoxError> {
        self.check_cell(cell)?;
        let g = self.grid as f64;
        let (row, col) = (cell.0 as f64, cell.1 as f64);
        Ok(BBox::new(b.cx * g - col, b.cy * g - row, b.w * g, b.h * g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corners(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::from_corners(x1, y1, x2, y2)
    }

    /// Counts unit cells of an integer grid covered by each box.
    fn cell_count_iou(a: [i64; 4], b: [i64; 4]) -> f64 {
        let mut inter = 0;
        let mut union = 0;
        for x in -5..10 {
            for y in -5..10 {
                let in_a = x >= a[0] && x < a[2] && y >= a[1] && y < a[3];
                let in_b = x >= b[0] && x < b[2] && y >= b[1] && y < b[3];
                inter += (in_a && in_b) as i64;
                union += (in_a || in_b) as i64;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_hand_cases() {
        let a = corners(0.0, 0.0, 2.0, 2.0);
        let b = corners(1.0, 1.0, 3.0, 3.0);
        assert_eq!(cell_count_iou([0, 0, 2, 2], [1, 1, 3, 3]), 1.0 / 7.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &corners(5.0, 5.0, 6.0, 6.0)), 0.0);
    }

    #[test]
    fn degenerate_boxes_have_zero_iou() {
        let z = BBox::new(0.5, 0.5, 0.0, 0.0);
        assert_eq!(iou(&z, &z), 0.0);
        assert_eq!(giou(&z, &z), 0.0);
    }

    #[test]
    fn giou_hand_cases() {
        let a = corners(0.0, 0.0, 1.0, 1.0);
        let b = corners(2.0, 2.0, 3.0, 3.0);
        assert!((giou(&a, &b) + 7.0 / 9.0).abs() < 1e-15);
        assert_eq!(giou(&a, &a), 1.0);
    }

    #[test]
    fn union_box_cases() {
        let a = corners(0.1, 0.1, 0.3, 0.3);
        let b = corners(0.2, 0.2, 0.6, 0.5);
        assert!(union_box(&[a]).unwrap().max_abs_diff(&a) < 1e-15);
        let u = union_box(&[a, b]).unwrap();
        assert!(u.max_abs_diff(&corners(0.1, 0.1, 0.6, 0.5)) < 1e-15);
        assert_eq!(union_box(&[]), Err(BoxError::EmptyUnion));
    }

    #[test]
    fn apply_offset_cases() {
        let bu = BBox::new(0.5, 0.5, 0.4, 0.4);
        assert!(apply_offset(&bu, &BBox::new(0.0, 0.0, 0.0, 0.0)).max_abs_diff(&bu) < 1e-15);
        let p = apply_offset(&bu, &BBox::new(0.02, -0.03, 0.05, 0.0));
        assert!(p.max_abs_diff(&BBox::new(0.52, 0.47, 0.45, 0.4)) < 1e-12);
    }

    #[test]
    fn clamp_pins_offcanvas_boxes_to_border() {
        let left = BBox::new(-2.0, 0.5, 0.3, 0.3).clamped();
        assert!(left.is_valid());
        assert!((left.w - MIN_SIZE).abs() < 1e-15);
        let right = BBox::new(3.0, 0.5, -0.3, 0.3).clamped();
        assert!(right.is_valid());
        assert!((right.x2() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clamp_jacobian_matches_finite_differences() {
        let points = [
            [0.5, 0.5, 0.4, 0.3],
            [0.1, 0.9, 0.5, 0.4],
            [0.95, 0.2, 0.3, 0.7],
            [0.5, 0.5, 1.4, 0.00001],
        ];
        for p in points {
            let (_, jac) = clamp_with_jacobian(p);
            for j in 0..4 {
                let h = 1e-7;
                let mut up = p;
                let mut dn = p;
                up[j] += h;
                dn[j] -= h;
                let (fu, _) = clamp_with_jacobian(up);
                let (fd, _) = clamp_with_jacobian(dn);
                for i in 0..4 {
                    let fdv = (fu[i] - fd[i]) / (2.0 * h);
                    assert!((fdv - jac[i][j]).abs() < 1e-6, "{p:?} d{i}/d{j}");
                }
            }
        }
    }

    #[test]
    fn giou_gradient_matches_finite_differences() {
        let b = BBox::new(0.5, 0.45, 0.3, 0.4);
        let cases = [
            BBox::new(0.52, 0.48, 0.25, 0.3),
            BBox::new(0.3, 0.3, 0.2, 0.2),
            BBox::new(0.7, 0.58, 0.5, 0.1),
            BBox::new(0.1, 0.9, 0.1, 0.1),
        ];
        for a in cases {
            let (v, grad) = giou_with_grad(&a, &b);
            assert_eq!(v, giou(&a, &b));
            for j in 0..4 {
                let h = 1e-6;
                let mut up = a.to_array();
                let mut dn = a.to_array();
                up[j] += h;
                dn[j] -= h;
                let fd = (giou(&BBox::from(up), &b) - giou(&BBox::from(dn), &b)) / (2.0 * h);
                assert!((fd - grad[j]).abs() < 1e-6, "{a:?} d/d{j}: {fd} vs {}", grad[j]);
            }
        }
    }

    #[test]
    fn mosaic_mapping_cases() {
        let b = BBox::new(0.3, 0.6, 0.2, 0.1);
        let single = MosaicLayout::single();
        assert_eq!(single.to_global((0, 0), &b).unwrap(), b);
        let two = MosaicLayout::new(2, (1, 0)).unwrap();
        let g = two.to_global((1, 0), &BBox::new(0.5, 0.5, 0.2, 0.2)).unwrap();
        assert!(g.max_abs_diff(&BBox::new(0.25, 0.75, 0.1, 0.1)) < 1e-15);
        assert!(matches!(
            two.to_global((2, 0), &b),
            Err(BoxError::CellOutOfRange { .. })
        ));
        assert_eq!(MosaicLayout::new(4, (0, 0)), Err(BoxError::InvalidGrid(4)));
    }

    #[test]
    fn mosaic_cells_tile_the_canvas() {
        for grid in 1..=3 {
            let layout = MosaicLayout::new(grid, (0, 0)).unwrap();
            let regions: Vec<BBox> = layout
                .cells()
                .map(|c| layout.cell_region(c).unwrap())
                .collect();
            let total: f64 = regions.iter().map(BBox::area).sum();
            assert!((total - 1.0).abs() < 1e-12);
            for (i, a) in regions.iter().enumerate() {
                for b in &regions[i + 1..] {
                    assert!(a.intersection_area(b) < 1e-15);
                }
            }
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64).prop_map(|(a, b, c, d)| {
            BBox::from_corners(a.min(c), b.min(d), a.max(c), b.max(d))
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!(giou(&a, &b) <= ab + 1e-15);
            prop_assert!(giou(&a, &b) >= -1.0);
        }

        #[test]
        fn corner_round_trip(b in arb_box()) {
            let [x1, y1, x2, y2] = b.corners();
            prop_assert!(BBox::from_corners(x1, y1, x2, y2).max_abs_diff(&b) <= 1e-12);
        }

        #[test]
        fn union_contains_and_is_idempotent(boxes in prop::collection::vec(arb_box(), 1..8)) {
            let u = union_box(&boxes).unwrap();
            for b in &boxes {
                prop_assert!(u.contains(b));
            }
            let mut with_u = boxes.clone();
            with_u.push(u);
            prop_assert!(union_box(&with_u).unwrap().max_abs_diff(&u) < 1e-15);
        }

        #[test]
        fn offsets_always_yield_valid_boxes(
            base in arb_box(),
            ofs in prop::array::uniform4(-3.0..3.0f64),
        ) {
            let p = apply_offset(&base, &BBox::from(ofs));
            prop_assert!(p.is_valid());
            prop_assert!(p.w >= MIN_SIZE - 1e-15 && p.h >= MIN_SIZE - 1e-15);
        }

        #[test]
        fn mosaic_round_trip(b in arb_box(), grid in 1usize..=3, r in 0usize..3, c in 0usize..3) {
            let cell = (r % grid, c % grid);
            let layout = MosaicLayout::new(grid, cell).unwrap();
            let back = layout.from_global(cell, &layout.to_global(cell, &b).unwrap()).unwrap();
            prop_assert!(back.max_abs_diff(&b) <= 1e-12);
        }
    }
}
