#include <set>

#include <gtest/gtest.h>

#include "instances.hpp"
#include "pmsm/loss.hpp"

using namespace pmsm;

namespace {

Mat<double> points_1d(std::initializer_list<double> xs) {
    Mat<double> m(1, static_cast<Eigen::Index>(xs.size()));
    Eigen::Index i = 0;
    for (double x : xs) m(0, i++) = x;
    return m;
}

}  // namespace

TEST(TripletLoss, HandExamples) {
    const std::vector<double> ap0{0.0}, an1{1.0};
    EXPECT_EQ(triplet_loss(ap0, an1, 0.1), 0.0);
    const std::vector<double> zero{0.0, 0.0};
    EXPECT_NEAR(triplet_loss(zero, zero, 0.1), 0.2, 1e-15);
    const std::vector<double> ap{0.5}, an{0.4};
    EXPECT_NEAR(triplet_loss(ap, an, 0.1), 0.2, 1e-12);
}

TEST(TripletLoss, NegativeDistanceIsAnError) {
    const std::vector<double> ap{-0.1}, an{0.4};
    EXPECT_THROW(triplet_loss(ap, an, 0.1), Error);
}

TEST(TripletLoss, NonNegativeAndZeroExactlyWhenConstraintsHold) {
    Rng rng(4);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> ap(5), an(5);
        bool all_hold = true;
        const double margin = rand_unit(rng);
        for (std::size_t i = 0; i < 5; ++i) {
            ap[i] = rand_unit(rng);
            an[i] = rand_unit(rng) * 2;
            all_hold = all_hold && an[i] >= ap[i] + margin;
        }
        const double l = triplet_loss(ap, an, margin);
        EXPECT_GE(l, 0.0);
        EXPECT_EQ(l == 0.0, all_hold);
    }
}

TEST(TripletLossGrad, CollapsedEmbeddingsGiveMarginPerTripletAndZeroGradient) {
    const Mat<double> e = Mat<double>::Constant(4, 6, 0.3);
    const std::vector<Triplet> ts{{0, 1, 2}, {3, 4, 5}};
    const auto r = triplet_loss_grad<double>(e, ts, 0.1);
    EXPECT_NEAR(r.loss, 0.2, 1e-15);
    EXPECT_EQ(r.active, 2u);
    EXPECT_EQ(r.d_embeddings.cwiseAbs().maxCoeff(), 0.0);
}

TEST(MakeBatch, SingleTripletAndInvariants) {
    Rng rng(1);
    const std::vector<int> ids{5, 5, 7};
    const auto b = make_batch(ids, 1, rng);
    ASSERT_EQ(b.images.size(), 3u);
    ASSERT_EQ(b.triplets.size(), 1u);
    EXPECT_EQ(b.triplets[0], (Triplet{0, 1, 2}));
    EXPECT_EQ(ids[b.images[0]], 5);
    EXPECT_EQ(ids[b.images[2]], 7);
    EXPECT_NE(b.images[0], b.images[1]);
}

TEST(MakeBatch, SingleIdentityIsAnError) {
    Rng rng(1);
    const std::vector<int> ids{3, 3, 3};
    EXPECT_THROW(make_batch(ids, 2, rng), Error);
    const std::vector<int> singles{1, 2, 3};
    EXPECT_THROW(make_batch(singles, 2, rng), Error);
}

TEST(MakeBatch, PaperBatchSizeHoldsSixtyTriplets) {
    Rng rng(2);
    std::vector<int> ids;
    for (int i = 0; i < 300; ++i) ids.push_back(i / 4);
    const auto b = make_batch(ids, 60, rng);
    EXPECT_EQ(b.images.size(), 180u);
    EXPECT_EQ(b.triplets.size(), 60u);
}

TEST(MakeBatch, AlwaysValidOverRandomDatasets) {
    Rng rng(3);
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<int> ids;
        const int n_ids = 2 + static_cast<int>(rand_below(rng, 8));
        for (int id = 0; id < n_ids; ++id) {
            const int k = 1 + static_cast<int>(rand_below(rng, 4));
            for (int j = 0; j < k; ++j) ids.push_back(id * 3);
        }
        ids.push_back(0);  // identity 0 has at least two images
        const std::size_t n = 1 + rand_below(rng, 10);
        const auto b = make_batch(ids, n, rng);
        ASSERT_EQ(b.images.size(), 3 * n);
        std::vector<int> labels;
        for (auto i : b.images) labels.push_back(ids[i]);
        for (std::size_t t = 0; t < n; ++t) {
            EXPECT_EQ(b.triplets[t], (Triplet{3 * t, 3 * t + 1, 3 * t + 2}));
            EXPECT_TRUE(is_valid(b.triplets[t], labels));
            EXPECT_NE(b.images[3 * t], b.images[3 * t + 1]);
        }
    }
}

TEST(MakeBatch, NegativeIdentityCoversAllOthers) {
    Rng rng(6);
    const std::vector<int> ids{0, 0, 1, 2, 3};
    std::set<int> negatives;
    for (int i = 0; i < 200; ++i) {
        const auto b = make_batch(ids, 1, rng);
        negatives.insert(ids[b.images[2]]);
    }
    EXPECT_EQ(negatives, (std::set<int>{1, 2, 3}));
}

TEST(PkBatch, ShapeAndIdentityBlocks) {
    Rng rng(5);
    std::vector<int> ids;
    for (int i = 0; i < 40; ++i) ids.push_back(i / 5);
    const auto b = make_pk_batch(ids, 3, 4, rng);
    ASSERT_EQ(b.images.size(), 12u);
    for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(ids[b.images[i]], ids[b.images[i / 4 * 4]]);
    EXPECT_TRUE(b.triplets.empty());
}

TEST(BatchHard, HandExample) {
    const auto e = points_1d({0, 1, 10, 11});
    const std::vector<int> ids{0, 0, 1, 1};
    const auto r = batch_hard_mine<double>(e, ids);
    ASSERT_EQ(r.triplets.size(), 4u);
    EXPECT_EQ(r.triplets[0], (Triplet{0, 1, 2}));
    EXPECT_EQ(r.triplets[1], (Triplet{1, 0, 2}));
    EXPECT_EQ(r.triplets[2], (Triplet{2, 3, 1}));
    EXPECT_EQ(r.triplets[3], (Triplet{3, 2, 1}));
}

TEST(BatchHard, IdenticalEmbeddingsGiveMarginPerTriplet) {
    const Mat<double> e = Mat<double>::Constant(3, 6, 1.5);
    const std::vector<int> ids{0, 0, 1, 1, 2, 2};
    const auto r = batch_hard_mine<double>(e, ids);
    ASSERT_EQ(r.triplets.size(), 6u);
    // ties go to the lowest index
    EXPECT_EQ(r.triplets[0], (Triplet{0, 1, 2}));
    EXPECT_EQ(r.triplets[2], (Triplet{2, 3, 0}));
    const auto l = triplet_loss_grad<double>(e, r.triplets, 0.1);
    EXPECT_NEAR(l.loss, 0.6, 1e-15);
}

TEST(BatchHard, SingletonIdentitiesAreSkipped) {
    const auto e = points_1d({0, 1, 5});
    const std::vector<int> ids{0, 0, 1};
    const auto r = batch_hard_mine<double>(e, ids);
    EXPECT_EQ(r.triplets.size(), 2u);
    EXPECT_EQ(r.skipped, 1u);
}

TEST(BatchHard, MatchesExhaustiveOracle) {
    const auto st = instances::batch_hard(55, 500);
    EXPECT_EQ(st.mismatches, 0u);
}

TEST(BatchAll, EnumeratesEveryValidTriplet) {
    const std::vector<int> ids{0, 0, 1, 1, 1};
    const auto r = batch_all_mine(ids);
    // identity 0: 2 anchors x 1 positive x 3 negatives; identity 1: 3 x 2 x 2
    EXPECT_EQ(r.triplets.size(), 6u + 12u);
    for (const auto& t : r.triplets) EXPECT_TRUE(is_valid(t, ids));
}

TEST(Schedules, PaperConstants) {
    const Schedules s;
    EXPECT_EQ(lr_at(0, s), 0.05);
    EXPECT_EQ(lr_at(9999, s), 0.05);
    EXPECT_EQ(lr_at(10000, s), 0.045);
    EXPECT_EQ(margin_at(1, s), 0.1);
    EXPECT_EQ(margin_at(10000, s), 0.1);
    EXPECT_EQ(margin_at(10001, s), 0.2);
    EXPECT_EQ(margin_at(0, s), 0.1);
}

TEST(Schedules, MonotoneAndPiecewiseConstant) {
    Schedules s;
    s.period = 7;
    for (std::uint64_t n = 1; n < 200; ++n) {
        EXPECT_LE(lr_at(n, s), lr_at(n - 1, s));
        EXPECT_GE(margin_at(n + 1, s), margin_at(n, s));
        if (n % 7 != 0) EXPECT_EQ(lr_at(n, s), lr_at(n - 1, s));
    }
    s.constant_margin = true;
    EXPECT_EQ(margin_at(1000, s), 0.1);
}

TEST(Schedules, Validation) {
    Schedules s;
    s.lr_decay = 1.5;
    EXPECT_THROW(s.validate(), ConfigError);
    s = {};
    s.period = 0;
    EXPECT_THROW(s.validate(), ConfigError);
}
