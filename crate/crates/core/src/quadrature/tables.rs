//! Fully symmetric triangle rules in orbit form. Weights are normalized so
//! that they sum to one over the reference triangle.

pub(super) struct OrbitRule {
    pub degree: usize,
    pub centroid: Option<f64>,
    /// `(a, w)`: the three permutations of `(a, a, 1 - 2a)`.
    pub s21: &'static [(f64, f64)],
    /// `(a, b, w)`: the six permutations of `(a, b, 1 - a - b)`.
    pub s111: &'static [(f64, f64, f64)],
}

impl OrbitRule {
    pub fn expand(&self) -> super::QuadratureRule {
        let mut points = Vec::new();
        let mut weights = Vec::new();
        if let Some(w) = self.centroid {
            points.push([1.0 / 3.0; 3]);
            weights.push(w);
        }
        for &(a, w) in self.s21 {
            let c = 1.0 - 2.0 * a;
            for p in [[a, a, c], [a, c, a], [c, a, a]] {
                points.push(p);
                weights.push(w);
            }
        }
        for &(a, b, w) in self.s111 {
            let c = 1.0 - a - b;
            for p in [[a, b, c], [a, c, b], [b, a, c], [b, c, a], [c, a, b], [c, b, a]] {
                points.push(p);
                weights.push(w);
            }
        }
        super::QuadratureRule { points, weights, degree: self.degree }
    }
}

pub(super) static ORBIT_RULES: &[OrbitRule] = &[
    // 1 points, degree 1 (Witherden-Vincent)
    OrbitRule { degree: 1, centroid: Some(1.0), s21: &[], s111: &[] },
    // 3 points, degree 2 (Witherden-Vincent)
    OrbitRule { degree: 2, centroid: None, s21: &[(0.16666666666666669, 0.3333333333333333)], s111: &[] },
    // 6 points, degree 4 (Witherden-Vincent)
    OrbitRule {
        degree: 4,
        centroid: None,
        s21: &[(0.09157621350977074, 0.10995174365532187), (0.4459484909159649, 0.22338158967801147)],
        s111: &[],
    },
    // 12 points, degree 6 (Witherden-Vincent)
    OrbitRule {
        degree: 6,
        centroid: None,
        s21: &[(0.06308901449150223, 0.05084490637020682), (0.24928674517091043, 0.11678627572637937)],
        s111: &[(0.05314504984481694, 0.3103524510337844, 0.08285107561837357)],
    },
    // 16 points, degree 8 (Witherden-Vincent)
    OrbitRule {
        degree: 8,
        centroid: Some(0.14431560767778717),
        s21: &[
            (0.05054722831703096, 0.03245849762319808),
            (0.4592925882927231, 0.09509163426728462),
            (0.1705693077517602, 0.10321737053471824),
        ],
        s111: &[(0.008394777409957588, 0.2631128296346381, 0.027230314174434993)],
    },
    // 25 points, degree 10 (Witherden-Vincent)
    OrbitRule {
        degree: 10,
        centroid: Some(0.08174332914628597),
        s21: &[(0.03205537321694352, 0.013352968813149567), (0.14216110105656438, 0.04595796360474473)],
        s111: &[
            (0.028367665339938453, 0.1637017337371825, 0.025297757707288385),
            (0.029619889488729734, 0.369146781827811, 0.03418464816295943),
            (0.14813288578382056, 0.32181299528883545, 0.06390490639642404),
        ],
    },
    // 33 points, degree 12 (Witherden-Vincent)
    OrbitRule {
        degree: 12,
        centroid: None,
        s21: &[
            (0.024646363436335583, 0.007931642509973639),
            (0.4882037509455415, 0.02426683808145203),
            (0.10925782765935427, 0.028486052068877544),
            (0.4401116486585931, 0.04991833492806094),
            (0.2714625070149261, 0.06254121319590276),
        ],
        s111: &[
            (0.021382490256170616, 0.12727971723358933, 0.015083677576511438),
            (0.02303415635526712, 0.29165567973834094, 0.02178358503860756),
            (0.11629601967792658, 0.25545422863851736, 0.04322736365941421),
        ],
    },
    // 49 points, degree 15 (Witherden-Vincent)
    OrbitRule {
        degree: 15,
        centroid: Some(0.04433538738218407),
        s21: &[
            (0.015811726250988645, 0.0029607746379053754),
            (0.4949969567691262, 0.009573846182460086),
            (0.070173552899986, 0.016444737562625163),
            (0.47417068143801977, 0.017396148000763414),
            (0.4053622141339755, 0.042713781571460566),
            (0.2263787134203496, 0.04678336172870963),
        ],
        s111: &[
            (0.009139237037308401, 0.07094860523645552, 0.004029853372018099),
            (0.01863871372816639, 0.16806864522241438, 0.011672621181575846),
            (0.018376112385681043, 0.31464824281245085, 0.015602572830575964),
            (0.09424205359215543, 0.19053558947639393, 0.028720586925201342),
            (0.0957967236476086, 0.33895061147527716, 0.031315476284969286),
        ],
    },
    // 79 points, degree 20 (Witherden-Vincent 20)
    OrbitRule {
        degree: 20,
        centroid: Some(0.027820221402906232),
        s21: &[
            (0.010976141028397779, 0.0015976815821332397),
            (0.03731088059888471, 0.004322550821331155),
            (0.476245611540499, 0.014203650606816881),
            (0.1093835967117146, 0.015660461552149067),
            (0.18629499774454095, 0.01834692594850583),
            (0.4455510569559248, 0.018904799866464896),
            (0.39342534781709987, 0.027576101258140917),
            (0.2545792676733391, 0.028166402615040494),
        ],
        s111: &[
            (0.004854937607623733, 0.06409058560843417, 0.002259739204251731),
            (0.007570780504696506, 0.15913370765706725, 0.004405794837116995),
            (0.010737212856011091, 0.28058141142366533, 0.00715640047691537),
            (0.009831548292802583, 0.4200237588162241, 0.007391363000510596),
            (0.03836368477537461, 0.09995229628813873, 0.008291423055227716),
            (0.0465603649076643, 0.19851813222878817, 0.01197279715790938),
            (0.10622720472027003, 0.2156070573900944, 0.01544521564419846),
            (0.054987479142986795, 0.3331348173095876, 0.017334451134438666),
            (0.1398080719917999, 0.317860123835772, 0.023383491463655474),
        ],
    },
];
