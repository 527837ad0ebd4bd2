#include "deop/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

namespace deop {
namespace {

// Plain ijk triple loop, the reference for matmul.
Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double s = 0;
            for (int kk = 0; kk < k; ++kk) s += a.at(i, kk) * b.at(kk, j);
            out.at(i, j) = s;
        }
    return out;
}

// Row softmax in extended precision.
std::vector<double> softmax_row_oracle(const std::vector<double>& xs) {
    long double mx = xs[0];
    for (double x : xs) mx = std::max<long double>(mx, x);
    long double sum = 0;
    std::vector<long double> e(xs.size());
    for (size_t i = 0; i < xs.size(); ++i) {
        e[i] = expl(static_cast<long double>(xs[i]) - mx);
        sum += e[i];
    }
    std::vector<double> out(xs.size());
    for (size_t i = 0; i < xs.size(); ++i) out[i] = static_cast<double>(e[i] / sum);
    return out;
}

TEST(Tensor, ConstructAndAccess) {
    Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    EXPECT_EQ(t.rank(), 2);
    EXPECT_EQ(t.dim(0), 2);
    EXPECT_EQ(t.dim(1), 3);
    EXPECT_DOUBLE_EQ(t.at(1, 2), 6);
    EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
    EXPECT_DOUBLE_EQ(Tensor::scalar(3.5).item(), 3.5);
    Tensor id = Tensor::eye(3);
    EXPECT_DOUBLE_EQ(id.at(1, 1), 1.0);
    EXPECT_DOUBLE_EQ(id.at(0, 1), 0.0);
}

TEST(Tensor, CloneIsDeep) {
    Tensor a = Tensor::from({2}, {1, 2});
    Tensor b = a.clone();
    b.at(0) = 99;
    EXPECT_DOUBLE_EQ(a.at(0), 1);
    Tensor alias = a;
    alias.at(0) = 7;
    EXPECT_DOUBLE_EQ(a.at(0), 7);
}

TEST(Tensor, MatmulMatchesOracle) {
    Rng rng(11);
    for (int m = 1; m <= 8; ++m)
        for (int k = 1; k <= 8; ++k)
            for (int n = 1; n <= 8; ++n) {
                Tensor a = Tensor::randn({m, k}, rng);
                Tensor b = Tensor::randn({k, n}, rng);
                Tensor c = matmul(a, b);
                Tensor ref = matmul_oracle(a, b);
                for (int i = 0; i < m * n; ++i) EXPECT_NEAR(c.at(i), ref.at(i), 1e-12);
            }
}

TEST(Tensor, MatmulShapeMismatchNamesShapes) {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    try {
        matmul(a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[4x2]"), std::string::npos) << msg;
    }
}

TEST(Tensor, SoftmaxMatchesOracle) {
    Rng rng(12);
    for (int trial = 0; trial < 40; ++trial) {
        const int n = static_cast<int>(rng.randint(1, 9));
        std::vector<double> xs(static_cast<size_t>(n));
        for (auto& x : xs) x = rng.uniform(-30, 30);
        Tensor t = Tensor::from({n}, xs);
        Tensor y = softmax(t, 0);
        auto ref = softmax_row_oracle(xs);
        for (int i = 0; i < n; ++i) EXPECT_NEAR(y.at(i), ref[i], 1e-13);
    }
}

TEST(Tensor, SoftmaxStableUnderLargeInputs) {
    Tensor y = softmax(Tensor::from({2}, {1000.0, 0.0}), 0);
    EXPECT_DOUBLE_EQ(y.at(0), 1.0);
    EXPECT_DOUBLE_EQ(y.at(1), 0.0);
    Tensor a = softmax(Tensor::from({3}, {0.3, -1.2, 2.0}), 0);
    Tensor b = softmax(Tensor::from({3}, {0.3 + 500, -1.2 + 500, 2.0 + 500}), 0);
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(a.at(i), b.at(i), 1e-12);
}

TEST(Tensor, SoftmaxAxis0OnMatrix) {
    Tensor t = Tensor::from({2, 2}, {0.0, 5.0, 1.0, 5.0});
    Tensor y = softmax(t, 0);
    // column 0: softmax(0,1), column 1: softmax(5,5)
    auto col0 = softmax_row_oracle({0.0, 1.0});
    EXPECT_NEAR(y.at(0, 0), col0[0], 1e-14);
    EXPECT_NEAR(y.at(1, 0), col0[1], 1e-14);
    EXPECT_NEAR(y.at(0, 1), 0.5, 1e-14);
    EXPECT_NEAR(y.at(1, 1), 0.5, 1e-14);
    Tensor rows = softmax(t, 1);
    EXPECT_NEAR(rows.at(0, 0) + rows.at(0, 1), 1.0, 1e-14);
}

TEST(Tensor, SoftmaxRejectsNonFinite) {
    Tensor t = Tensor::from({2}, {1.0, 2.0});
    t.at(1) = std::numeric_limits<double>::infinity();
    EXPECT_THROW(softmax(t, 0), NumericError);
}

TEST(Tensor, LogRejectsNonPositive) {
    EXPECT_THROW(log(Tensor::from({2}, {1.0, 0.0})), ContractError);
    EXPECT_THROW(log(Tensor::from({1}, {-2.0})), ContractError);
}

TEST(Tensor, ElementwiseOps) {
    Tensor a = Tensor::from({3}, {1, -2, 3});
    Tensor b = Tensor::from({3}, {4, 5, -6});
    EXPECT_DOUBLE_EQ(add(a, b).at(1), 3);
    EXPECT_DOUBLE_EQ(sub(a, b).at(0), -3);
    EXPECT_DOUBLE_EQ(mul(a, b).at(2), -18);
    EXPECT_DOUBLE_EQ(divide(a, b).at(0), 0.25);
    EXPECT_DOUBLE_EQ(relu(a).at(1), 0);
    EXPECT_DOUBLE_EQ(clamp(a, -1, 2).at(1), -1);
    EXPECT_DOUBLE_EQ(scale(a, 2).at(2), 6);
    EXPECT_DOUBLE_EQ(add_scalar(a, 10).at(0), 11);
    EXPECT_NEAR(sigmoid(Tensor::scalar(0)).item(), 0.5, 1e-15);
    EXPECT_THROW(add(a, Tensor::zeros({4})), ShapeError);
}

TEST(Tensor, ReductionsAndRowSums) {
    Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    EXPECT_DOUBLE_EQ(reduce_sum(a).item(), 21);
    EXPECT_DOUBLE_EQ(reduce_mean(a).item(), 3.5);
    Tensor rs = row_sums(a);
    EXPECT_DOUBLE_EQ(rs.at(0), 6);
    EXPECT_DOUBLE_EQ(rs.at(1), 15);
}

TEST(Tensor, SliceAndConcat) {
    Tensor a = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});
    Tensor mid = slice_rows(a, 1, 1);
    EXPECT_EQ(mid.shape(), (Shape{1, 2}));
    EXPECT_DOUBLE_EQ(mid.at(0, 1), 4);
    Tensor cat = concat_rows({slice_rows(a, 0, 1), slice_rows(a, 2, 1)});
    EXPECT_DOUBLE_EQ(cat.at(1, 0), 5);
    Tensor col = slice_cols(a, 1, 1);
    EXPECT_EQ(col.shape(), (Shape{3, 1}));
    EXPECT_DOUBLE_EQ(col.at(2, 0), 6);
    Tensor wide = concat_cols({a, a});
    EXPECT_EQ(wide.shape(), (Shape{3, 4}));
    EXPECT_DOUBLE_EQ(wide.at(0, 3), 2);
    EXPECT_THROW(slice_rows(a, 2, 2), ShapeError);
}

TEST(Tensor, ResizeBilinearIdentityAndMean) {
    Tensor a = Tensor::from({2, 2}, {0, 1, 2, 3});
    Tensor same = resize_bilinear(a, 2, 2);
    for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(same.at(i), a.at(i));
    Tensor one = resize_bilinear(a, 1, 1);
    EXPECT_NEAR(one.at(0), 1.5, 1e-14);
    Tensor up = resize_bilinear(a, 4, 4);
    EXPECT_DOUBLE_EQ(up.at(0, 0), 0.0);
    EXPECT_DOUBLE_EQ(up.at(3, 3), 3.0);
    // center samples interpolate between the four corners
    EXPECT_NEAR(up.at(1, 1), 0.75, 1e-14);
}

TEST(Tensor, Im2colMatchesHandUnfold) {
    // 1 channel, 3x3 input, k=2, stride=1, pad=0 -> 4 columns of 4 taps
    Tensor x = Tensor::from({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor cols = im2col(x, 2, 1, 0);
    EXPECT_EQ(cols.shape(), (Shape{4, 4}));
    // column 0 is the top-left patch in row-major tap order
    EXPECT_DOUBLE_EQ(cols.at(0, 0), 1);
    EXPECT_DOUBLE_EQ(cols.at(1, 0), 2);
    EXPECT_DOUBLE_EQ(cols.at(2, 0), 4);
    EXPECT_DOUBLE_EQ(cols.at(3, 0), 5);
    // column 3 is the bottom-right patch
    EXPECT_DOUBLE_EQ(cols.at(0, 3), 5);
    EXPECT_DOUBLE_EQ(cols.at(3, 3), 9);
    // padding pulls in zeros
    Tensor padded = im2col(x, 3, 1, 1);
    EXPECT_EQ(padded.shape(), (Shape{9, 9}));
    EXPECT_DOUBLE_EQ(padded.at(0, 0), 0);
    EXPECT_DOUBLE_EQ(padded.at(4, 0), 1);
}

TEST(Tensor, NonFiniteResultsRejected) {
    Tensor big = Tensor::full({2}, 1e308);
    EXPECT_THROW(mul(big, big), NumericError);
    EXPECT_THROW(exp(Tensor::scalar(1e4)), NumericError);
}

// --- gradients ---

TEST(Grad, SumOfSquaresAnalytic) {
    Tensor x = Tensor::from({3}, {1.0, -2.0, 0.5});
    x.set_requires_grad(true);
    GradTape tape;
    {
        TapeScope scope(tape);
        Tensor loss = reduce_sum(mul(x, x));
        tape.backward(loss);
    }
    Tensor g = tape.grad(x);
    EXPECT_DOUBLE_EQ(g.at(0), 2.0);
    EXPECT_DOUBLE_EQ(g.at(1), -4.0);
    EXPECT_DOUBLE_EQ(g.at(2), 1.0);
}

TEST(Grad, SoftmaxSumIsConstant) {
    Tensor x = Tensor::from({4}, {0.3, -1.0, 2.0, 0.0});
    x.set_requires_grad(true);
    GradTape tape;
    {
        TapeScope scope(tape);
        tape.backward(reduce_sum(softmax(x, 0)));
    }
    Tensor g = tape.grad(x);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(g.at(i), 0.0, 1e-15);
}

TEST(Grad, UninfluencedTensorGetsExactZeros) {
    Tensor x = Tensor::from({2}, {1.0, 2.0});
    Tensor unused = Tensor::from({2}, {5.0, 5.0});
    x.set_requires_grad(true);
    unused.set_requires_grad(true);
    GradTape tape;
    {
        TapeScope scope(tape);
        tape.backward(reduce_sum(mul(x, x)));
    }
    Tensor g = tape.grad(unused);
    EXPECT_EQ(g.at(0), 0.0);
    EXPECT_EQ(g.at(1), 0.0);
    EXPECT_FALSE(tape.has_grad(unused));
}

TEST(Grad, NoTapeScopeSuppressesRecording) {
    Tensor x = Tensor::from({2}, {1.0, 2.0});
    x.set_requires_grad(true);
    GradTape tape;
    {
        TapeScope scope(tape);
        Tensor y;
        {
            NoTapeScope off;
            y = mul(x, x);
        }
        EXPECT_FALSE(y.requires_grad());
        EXPECT_EQ(tape.num_ops(), 0u);
    }
}

TEST(Grad, FrozenInputReceivesNoGradient) {
    Tensor w = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor frozen = Tensor::from({2, 2}, {5, 6, 7, 8});
    w.set_requires_grad(true);
    GradTape tape;
    {
        TapeScope scope(tape);
        tape.backward(reduce_sum(matmul(w, frozen)));
    }
    EXPECT_FALSE(tape.has_grad(frozen));
    EXPECT_TRUE(tape.has_grad(w));
}

struct GradCase {
    const char* name;
    std::function<Tensor(const Tensor&)> f;
    Shape shape;
    double lo, hi;
};

TEST(Grad, FiniteDifferenceSweep) {
    std::vector<GradCase> cases = {
        {"mul_self", [](const Tensor& x) { return reduce_sum(mul(x, x)); }, {4, 4}, -2, 2},
        {"exp", [](const Tensor& x) { return reduce_sum(exp(x)); }, {3, 3}, -2, 2},
        {"log", [](const Tensor& x) { return reduce_sum(log(x)); }, {8}, 0.5, 3},
        {"sqrt", [](const Tensor& x) { return reduce_sum(sqrt(x)); }, {8}, 0.5, 3},
        {"sigmoid", [](const Tensor& x) { return reduce_sum(sigmoid(x)); }, {4, 4}, -3, 3},
        {"pow25", [](const Tensor& x) { return reduce_sum(pow_scalar(x, 2.5)); }, {6}, 0.5, 2},
        {"softmax_weighted",
         [](const Tensor& x) {
             Tensor w = Tensor::from({5}, {1, -2, 3, 0.5, 2});
             return reduce_sum(mul(softmax(x, 0), w));
         },
         {5},
         -2,
         2},
        {"softmax2d_axis1",
         [](const Tensor& x) {
             Tensor w = Tensor::from({3, 4}, {1, 2, 3, 4, -1, -2, -3, -4, 0.5, 1.5, 2.5, 3.5});
             return reduce_sum(mul(softmax(x, 1), w));
         },
         {3, 4},
         -2,
         2},
        {"matmul_left",
         [](const Tensor& x) {
             Tensor b = Tensor::from({4, 2}, {1, 2, 3, -1, 0.5, 2, -2, 1});
             return reduce_sum(mul(matmul(x, b), matmul(x, b)));
         },
         {3, 4},
         -1,
         1},
        {"transpose_chain", [](const Tensor& x) { return reduce_sum(mul(transpose(x), transpose(x))); }, {3, 4}, -1, 1},
        {"layer_norm",
         [](const Tensor& x) {
             Tensor g = Tensor::from({4}, {1.2, 0.8, 1.0, -0.5});
             Tensor b = Tensor::from({4}, {0.1, -0.2, 0.0, 0.3});
             Tensor w = Tensor::from({3, 4}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
             return reduce_sum(mul(layer_norm(x, g, b), w));
         },
         {3, 4},
         -2,
         2},
        {"divide",
         [](const Tensor& x) {
             Tensor b = Tensor::from({6}, {2, 3, 1.5, 2.5, 4, 1.2});
             return reduce_sum(divide(x, b));
         },
         {6},
         -2,
         2},
        {"row_sums_sq", [](const Tensor& x) { return reduce_sum(mul(row_sums(x), row_sums(x))); }, {3, 4}, -1, 1},
        {"scale_by_tensor",
         [](const Tensor& x) {
             Tensor s = Tensor::scalar(1.7);
             return reduce_sum(mul(scale_by(x, s), scale_by(x, s)));
         },
         {5},
         -1,
         1},
        {"div_by_tensor",
         [](const Tensor& x) {
             Tensor s = Tensor::scalar(2.3);
             return reduce_sum(mul(div_by(x, s), div_by(x, s)));
         },
         {5},
         -1,
         1},
        {"slice_concat",
         [](const Tensor& x) {
             Tensor top = slice_rows(x, 0, 1);
             Tensor rest = slice_rows(x, 1, 2);
             Tensor re = concat_rows({rest, top});
             return reduce_sum(mul(re, re));
         },
         {3, 4},
         -1,
         1},
        {"resize_up",
         [](const Tensor& x) {
             Tensor y = resize_bilinear(x, 7, 5);
             return reduce_sum(mul(y, y));
         },
         {3, 4},
         -1,
         1},
        {"resize_down",
         [](const Tensor& x) {
             Tensor y = resize_bilinear(x, 2, 2);
             return reduce_sum(mul(y, y));
         },
         {4, 4},
         -1,
         1},
        {"im2col_pad",
         [](const Tensor& x) {
             Tensor flat = reshape(x, {2, 4, 4});
             Tensor cols = im2col(flat, 3, 2, 1);
             return reduce_sum(mul(cols, cols));
         },
         {2, 16},
         -1,
         1},
        {"reshape_chain",
         [](const Tensor& x) {
             Tensor y = reshape(x, {2, 6});
             return reduce_sum(mul(y, y));
         },
         {3, 4},
         -1,
         1},
    };
    Rng rng(77);
    for (const auto& c : cases) {
        const int64_t n = shape_numel(c.shape);
        ASSERT_LE(n, 64);
        std::vector<double> v(static_cast<size_t>(n));
        for (auto& x : v) x = rng.uniform(c.lo, c.hi);
        Tensor x = Tensor::from(c.shape, v);
        const double err = grad_check(c.f, x, 1e-6);
        EXPECT_LT(err, 1e-5) << c.name;
    }
}

TEST(Grad, SharedSubexpressionAccumulates) {
    Tensor x = Tensor::from({2}, {1.5, -0.5});
    x.set_requires_grad(true);
    GradTape tape;
    {
        TapeScope scope(tape);
        Tensor y = mul(x, x);
        tape.backward(reduce_sum(add(y, y)));
    }
    Tensor g = tape.grad(x);
    EXPECT_DOUBLE_EQ(g.at(0), 4 * 1.5);
    EXPECT_DOUBLE_EQ(g.at(1), 4 * -0.5);
}

TEST(Grad, BackwardRequiresScalar) {
    Tensor x = Tensor::from({2}, {1, 2});
    x.set_requires_grad(true);
    GradTape tape;
    TapeScope scope(tape);
    Tensor y = mul(x, x);
    EXPECT_THROW(tape.backward(y), ContractError);
}

// --- rng ---

TEST(Rng, DeterministicAcrossInstances) {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
    Rng c(42), d(43);
    bool differ = false;
    for (int i = 0; i < 10; ++i) differ = differ || (c.next_u64() != d.next_u64());
    EXPECT_TRUE(differ);
}

TEST(Rng, UniformInUnitInterval) {
    Rng rng(7);
    for (int i = 0; i < 1000; ++i) {
        double u = rng.uniform();
        EXPECT_GE(u, 0.0);
        EXPECT_LT(u, 1.0);
    }
}

TEST(Rng, RandintInclusiveBounds) {
    Rng rng(9);
    bool saw_lo = false, saw_hi = false;
    for (int i = 0; i < 2000; ++i) {
        int64_t v = rng.randint(2, 5);
        EXPECT_GE(v, 2);
        EXPECT_LE(v, 5);
        saw_lo = saw_lo || v == 2;
        saw_hi = saw_hi || v == 5;
    }
    EXPECT_TRUE(saw_lo);
    EXPECT_TRUE(saw_hi);
    EXPECT_EQ(rng.randint(3, 3), 3);
}

TEST(Rng, NormalMomentsRoughlyStandard) {
    Rng rng(123);
    double sum = 0, sq = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        double x = rng.normal();
        sum += x;
        sq += x * x;
    }
    EXPECT_NEAR(sum / n, 0.0, 0.05);
    EXPECT_NEAR(sq / n, 1.0, 0.05);
}

TEST(Rng, MixSeedSeparatesStreams) {
    EXPECT_NE(mix_seed(1, 0), mix_seed(1, 1));
    EXPECT_NE(mix_seed(1, 0), mix_seed(2, 0));
    EXPECT_EQ(mix_seed(5, 9), mix_seed(5, 9));
}

TEST(Rng, HashStringStable) {
    EXPECT_EQ(hash_string("circle_solid"), hash_string("circle_solid"));
    EXPECT_NE(hash_string("circle_solid"), hash_string("circle_stripes"));
    EXPECT_NE(hash_string(""), hash_string(" "));
}

}  // namespace
}  // namespace deop
