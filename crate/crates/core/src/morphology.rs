//! Binary morphology on row-major `bool` grids.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

pub(crate) const NEIGHBORS8: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

pub(crate) fn neighbors8(
    idx: usize,
    height: usize,
    width: usize,
) -> impl Iterator<Item = usize> {
    let (y, x) = ((idx / width) as isize, (idx % width) as isize);
    NEIGHBORS8.iter().filter_map(move |&(dy, dx)| {
        let (ny, nx) = (y + dy, x + dx);
        (ny >= 0 && nx >= 0 && (ny as usize) < height && (nx as usize) < width)
            .then(|| ny as usize * width + nx as usize)
    })
}

/// 3x3 erosion. Pixels outside the grid count as set, so a region is only
/// eroded away from its boundary with other regions.
pub fn erode(mask: &[bool], height: usize, width: usize) -> Vec<bool> {
    (0..mask.len())
        .map(|i| mask[i] && neighbors8(i, height, width).all(|j| mask[j]))
        .collect()
}

/// Chessboard distance from every set pixel to the nearest unset pixel
/// (0 for unset pixels). The grid border does not count as unset.
pub fn distance_to_boundary(mask: &[bool], height: usize, width: usize) -> Vec<u32> {
    let mut dist = vec![u32::MAX; mask.len()];
    let mut queue = VecDeque::new();
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            dist[i] = 0;
            queue.push_back(i);
        }
    }
    if queue.is_empty() {
        // Region covers the whole grid: fall back to distance from the border.
        for (i, d) in dist.iter_mut().enumerate() {
            let (y, x) = (i / width, i % width);
            *d = (y.min(height - 1 - y).min(x).min(width - 1 - x) + 1) as u32;
        }
        return dist;
    }
    while let Some(i) = queue.pop_front() {
        for j in neighbors8(i, height, width) {
            if dist[j] == u32::MAX {
                dist[j] = dist[i] + 1;
                queue.push_back(j);
            }
        }
    }
    dist
}

/// Zhang-Suen thinning to a one-pixel-wide 8-connected skeleton.
pub fn thin(mask: &[bool], height: usize, width: usize) -> Vec<bool> {
    let mut img = mask.to_vec();
    let at = |img: &[bool], y: isize, x: isize| -> bool {
        y >= 0
            && x >= 0
            && (y as usize) < height
            && (x as usize) < width
            && img[y as usize * width + x as usize]
    };
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for y in 0..height as isize {
                for x in 0..width as isize {
                    if !img[y as usize * width + x as usize] {
                        continue;
                    }
                    // P2..P9 clockwise from north.
                    let p = [
                        at(&img, y - 1, x),
                        at(&img, y - 1, x + 1),
                        at(&img, y, x + 1),
                        at(&img, y + 1, x + 1),
                        at(&img, y + 1, x),
                        at(&img, y + 1, x - 1),
                        at(&img, y, x - 1),
                        at(&img, y - 1, x - 1),
                    ];
                    let b = p.iter().filter(|&&v| v).count();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
                    if a != 1 {
                        continue;
                    }
                    let (p2, p4, p6, p8) = (p[0], p[2], p[4], p[6]);
                    let ok = if pass == 0 {
                        !(p2 && p4 && p6) && !(p4 && p6 && p8)
                    } else {
                        !(p2 && p4 && p8) && !(p2 && p6 && p8)
                    };
                    if ok {
                        remove.push(y as usize * width + x as usize);
                    }
                }
            }
            if !remove.is_empty() {
                changed = true;
                for i in remove {
                    img[i] = false;
                }
            }
        }
        if !changed {
            return img;
        }
    }
}
