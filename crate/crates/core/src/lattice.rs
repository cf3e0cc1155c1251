//! Subgroups of `Z^k` in Hermite normal form.

/// Row-echelon basis of the subgroup generated by `gens`, with positive
/// pivots and entries above each pivot reduced into `[0, pivot)`.
pub fn hnf(gens: &[Vec<i64>], dim: usize) -> Vec<Vec<i64>> {
    let mut rows: Vec<Vec<i64>> = gens.iter().filter(|g| g.iter().any(|&x| x != 0)).cloned().collect();
    let mut r = 0;
    for col in 0..dim {
        loop {
            let nz: Vec<usize> = (r..rows.len()).filter(|&i| rows[i][col] != 0).collect();
            if nz.len() <= 1 {
                if let Some(&i) = nz.first() {
                    rows.swap(r, i);
                    if rows[r][col] < 0 {
                        rows[r].iter_mut().for_each(|x| *x = -*x);
                    }
                    r += 1;
                }
                break;
            }
            let p = *nz.iter().min_by_key(|&&i| rows[i][col].abs()).unwrap();
            for &i in &nz {
                if i != p {
                    let f = rows[i][col] / rows[p][col];
                    for k in 0..dim {
                        rows[i][k] -= f * rows[p][k];
                    }
                }
            }
        }
    }
    rows.truncate(r);
    for i in 0..rows.len() {
        let pc = pivot(&rows[i]);
        for j in 0..i {
            let f = rows[j][pc].div_euclid(rows[i][pc]);
            if f != 0 {
                for k in 0..dim {
                    rows[j][k] -= f * rows[i][k];
                }
            }
        }
    }
    rows
}

pub fn pivot(row: &[i64]) -> usize {
    row.iter().position(|&x| x != 0).expect("nonzero row")
}

/// Canonical representative of `v` modulo the lattice spanned by `basis`.
pub fn reduce(basis: &[Vec<i64>], v: &[i64]) -> Vec<i64> {
    let mut v = v.to_vec();
    for row in basis {
        let pc = pivot(row);
        let f = v[pc].div_euclid(row[pc]);
        if f != 0 {
            for k in 0..v.len() {
                v[k] -= f * row[k];
            }
        }
    }
    v
}

/// Integer coordinates of `v` in `basis`, if `v` lies in the lattice.
pub fn coefficients(basis: &[Vec<i64>], v: &[i64]) -> Option<Vec<i64>> {
    let mut v = v.to_vec();
    let mut coeffs = Vec::with_capacity(basis.len());
    for row in basis {
        let pc = pivot(row);
        if v[..pc].iter().any(|&x| x != 0) || v[pc] % row[pc] != 0 {
            return None;
        }
        let f = v[pc] / row[pc];
        for k in 0..v.len() {
            v[k] -= f * row[k];
        }
        coeffs.push(f);
    }
    v.iter().all(|&x| x == 0).then_some(coeffs)
}

pub fn contains(basis: &[Vec<i64>], v: &[i64]) -> bool {
    coefficients(basis, v).is_some()
}

/// Index `[Z^dim : L]`, `None` when infinite.
pub fn index(basis: &[Vec<i64>], dim: usize) -> Option<u64> {
    (basis.len() == dim).then(|| basis.iter().map(|r| r[pivot(r)] as u64).product())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hnf_of_plus_minus_one_is_z() {
        assert_eq!(hnf(&[vec![1], vec![-1]], 1), vec![vec![1]]);
        assert_eq!(hnf(&[vec![4], vec![6]], 1), vec![vec![2]]);
        assert_eq!(hnf(&[vec![0]], 1), Vec::<Vec<i64>>::new());
    }

    #[test]
    fn time_kernel_of_parity_lattice() {
        // (displacement, time) generators of the zero-mean +-1 walk.
        let b = hnf(&[vec![1, 1], vec![0, 2], vec![-1, 1]], 2);
        assert_eq!(b, vec![vec![1, 1], vec![0, 2]]);
        assert_eq!(index(&b, 2), Some(2));
        assert!(contains(&b, &[3, 5]));
        assert!(!contains(&b, &[0, 1]));
        assert_eq!(coefficients(&b, &[3, 5]), Some(vec![3, 1]));
    }

    #[test]
    fn reduction_picks_unique_coset_representative() {
        let b = hnf(&[vec![2, 0], vec![0, 3]], 2);
        assert_eq!(reduce(&b, &[5, -4]), vec![1, 2]);
        assert_eq!(reduce(&b, &[1, 2]), vec![1, 2]);
        assert_eq!(index(&hnf(&[vec![1, 0]], 2), 2), None);
    }
}
