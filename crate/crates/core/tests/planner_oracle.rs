//! A* against an independent Dijkstra on random grids.

use std::collections::BinaryHeap;

use quadnav_core::nav_sim::astar;
use quadnav_core::waypoint_world::{Cell, OccupancyGrid, Origin, Passable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIZE: usize = 40;

fn random_grid(rng: &mut ChaCha8Rng) -> OccupancyGrid {
    let occupied = (0..SIZE * SIZE).map(|_| rng.gen_bool(0.2)).collect();
    OccupancyGrid::new(1.0, SIZE, SIZE, Origin { x: 0.0, y: 0.0 }, occupied).unwrap()
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

/// Single-source shortest distances with plain f64 costs. Diagonals need
/// both orthogonal neighbours free.
fn dijkstra(grid: &OccupancyGrid, source: Cell) -> Vec<f64> {
    let free = |c: isize, r: isize| c >= 0 && r >= 0 && c < SIZE as isize && r < SIZE as isize && grid.is_free(Cell { col: c as usize, row: r as usize });
    let mut dist = vec![f64::INFINITY; SIZE * SIZE];
    let mut heap = BinaryHeap::new();
    let s = source.row * SIZE + source.col;
    dist[s] = 0.0;
    heap.push(Entry(0.0, s));
    while let Some(Entry(d, i)) = heap.pop() {
        if d > dist[i] {
            continue;
        }
        let (c, r) = ((i % SIZE) as isize, (i / SIZE) as isize);
        for dc in -1..=1isize {
            for dr in -1..=1isize {
                if (dc, dr) == (0, 0) || !free(c + dc, r + dr) {
                    continue;
                }
                let cost = if dc != 0 && dr != 0 {
                    if !free(c + dc, r) || !free(c, r + dr) {
                        continue;
                    }
                    2f64.sqrt()
                } else {
                    1.0
                };
                let j = ((r + dr) as usize) * SIZE + (c + dc) as usize;
                if d + cost < dist[j] {
                    dist[j] = d + cost;
                    heap.push(Entry(d + cost, j));
                }
            }
        }
    }
    dist
}

#[test]
fn astar_matches_dijkstra_on_random_grids() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut pairs = 0;
    let mut unsolvable = 0;
    for _ in 0..50 {
        let grid = random_grid(&mut rng);
        let free: Vec<Cell> = (0..SIZE * SIZE)
            .map(|i| Cell { col: i % SIZE, row: i / SIZE })
            .filter(|c| grid.is_free(*c))
            .collect();
        for _ in 0..8 {
            let start = free[rng.gen_range(0..free.len())];
            let dist = dijkstra(&grid, start);
            for _ in 0..5 {
                let goal = free[rng.gen_range(0..free.len())];
                let expected = dist[goal.row * SIZE + goal.col];
                match astar(&grid, start, goal) {
                    Some((path, cost)) => {
                        assert!((cost.value() - expected).abs() < 1e-9, "{start:?}->{goal:?}: {} vs {expected}", cost.value());
                        assert_eq!(path.first(), Some(&start));
                        assert_eq!(path.last(), Some(&goal));
                        let walked: f64 = path
                            .windows(2)
                            .map(|w| {
                                let (dc, dr) = (w[0].col.abs_diff(w[1].col), w[0].row.abs_diff(w[1].row));
                                assert!(dc <= 1 && dr <= 1 && dc + dr > 0);
                                assert!(grid.is_free(w[1]));
                                if dc + dr == 2 {
                                    assert!(grid.is_free(Cell { col: w[1].col, row: w[0].row }));
                                    assert!(grid.is_free(Cell { col: w[0].col, row: w[1].row }));
                                    2f64.sqrt()
                                } else {
                                    1.0
                                }
                            })
                            .sum();
                        assert!((walked - expected).abs() < 1e-9);
                        pairs += 1;
                    }
                    None => {
                        assert!(expected.is_infinite(), "A* missed a path {start:?}->{goal:?}");
                        unsolvable += 1;
                    }
                }
            }
        }
    }
    assert!(pairs >= 1000, "only {pairs} solvable pairs ({unsolvable} unsolvable)");
}

#[test]
fn astar_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let grid = random_grid(&mut rng);
    let free: Vec<Cell> = (0..SIZE * SIZE).map(|i| Cell { col: i % SIZE, row: i / SIZE }).filter(|c| grid.is_free(*c)).collect();
    let (a, b) = (free[0], free[free.len() - 1]);
    assert_eq!(astar(&grid, a, b), astar(&grid, a, b));
}
