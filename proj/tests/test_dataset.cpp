#include <cstdlib>
#include <set>

#include <gtest/gtest.h>

#include "pmsm/dataset.hpp"
#include "test_util.hpp"

using namespace pmsm;

namespace {

SynthConfig small_config() {
    SynthConfig c;
    c.num_models = 2;
    c.identities_per_model = 2;
    c.images_per_identity = 3;
    c.image_size = 32;
    return c;
}

Dataset grid_dataset(int identities, int per_identity) {
    Dataset ds;
    int sid = 0;
    for (int id = 0; id < identities; ++id)
        for (int k = 0; k < per_identity; ++k) ds.images.push_back({Image(8, 8), id % 3, id, sid++});
    return ds;
}

void expect_split_partition(const Dataset& ds, const EvalSplit& s) {
    std::set<std::size_t> probe(s.probe.begin(), s.probe.end()), gallery(s.gallery.begin(), s.gallery.end());
    for (std::size_t p : probe) EXPECT_FALSE(gallery.contains(p));
    std::set<int> ids(s.identities.begin(), s.identities.end());
    std::size_t expected = 0;
    for (std::size_t i = 0; i < ds.size(); ++i)
        if (ids.contains(ds[i].identity_id)) {
            ++expected;
            EXPECT_TRUE(probe.contains(i) || gallery.contains(i));
        }
    EXPECT_EQ(probe.size() + gallery.size(), expected);
}

}  // namespace

TEST(Synthetic, Counts) {
    const auto ds = generate_synthetic(small_config());
    EXPECT_EQ(ds.size(), 12u);
    EXPECT_EQ(ds.num_identities(), 4u);
    EXPECT_EQ(ds.models().size(), 2u);
}

TEST(Synthetic, DeterministicAcrossCallsAndThreads) {
    auto c = small_config();
    c.jitter_px = 2;
    c.illumination = 0.2;
    const auto a = generate_synthetic(c, 1);
    const auto b = generate_synthetic(c, 1);
    const auto d = generate_synthetic(c, 4);
    EXPECT_EQ(a, b);
    EXPECT_EQ(a, d);
    c.rng_seed = 2;
    EXPECT_NE(a, generate_synthetic(c));
}

TEST(Synthetic, NoNuisanceMeansIdenticalInstances) {
    auto c = small_config();
    c.noise_sigma = 0;
    c.jitter_px = 0;
    const auto ds = generate_synthetic(c);
    for (const auto& [id, imgs] : ds.images_by_identity())
        for (std::size_t k = 1; k < imgs.size(); ++k) EXPECT_EQ(ds[imgs[0]].pixels, ds[imgs[k]].pixels);
    // but identities differ
    EXPECT_NE(ds[0].pixels, ds[3].pixels);
}

TEST(Synthetic, IntensitiesInUnitRangeAndHierarchyConsistent) {
    auto c = small_config();
    c.noise_sigma = 0.3;
    c.illumination = 0.5;
    const auto ds = generate_synthetic(c);
    for (const auto& im : ds.images)
        for (float v : im.pixels.pixels) {
            EXPECT_GE(v, 0.0f);
            EXPECT_LE(v, 1.0f);
        }
    EXPECT_NO_THROW(identity_to_model(ds));
}

TEST(Synthetic, OverlappingCueRegionsRejected) {
    auto c = small_config();
    c.identity_cue_region = {0.5, 0.5, 0.9, 0.9};
    c.model_cue_region = {0.4, 0.4, 0.6, 0.6};
    try {
        generate_synthetic(c);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("must not overlap"), std::string::npos);
    }
}

TEST(Synthetic, IdentityDecalsDifferWithinModel) {
    SynthConfig c;
    const auto cues = synth_identity_cues(c);
    std::set<std::uint32_t> patterns;
    for (const auto& q : cues) patterns.insert(q.pattern);
    EXPECT_EQ(patterns.size(), cues.size());
}

TEST(Manifest, LoadsReadableRowsAndSkipsBrokenOnes) {
    TempDir dir;
    const auto ds = generate_synthetic(small_config());
    export_dataset(ds, dir.path);
    auto rows = read_manifest_rows(dir / "manifest.csv");
    ASSERT_EQ(rows.size(), 12u);

    spit(dir / "three.csv", "path,model_id,identity_id\n" + rows[0].path + ",0,0\n" + rows[1].path + ",0,0\n" +
                                rows[3].path + ",0,1\n");
    std::vector<std::string> warnings;
    const auto three = load_manifest(dir / "three.csv", 32, &warnings);
    EXPECT_EQ(three.size(), 3u);
    EXPECT_TRUE(warnings.empty());

    spit(dir / "broken.csv", "path,model_id,identity_id\n" + rows[0].path + ",0,0\nmissing.png,0,0\n");
    const auto one = load_manifest(dir / "broken.csv", 32, &warnings);
    EXPECT_EQ(one.size(), 1u);
    ASSERT_EQ(warnings.size(), 1u);
    EXPECT_NE(warnings[0].find("missing.png"), std::string::npos);
}

TEST(Manifest, RoundTripPreservesLabelsAndQuantizedPixels) {
    TempDir dir;
    const auto ds = generate_synthetic(small_config());
    export_dataset(ds, dir.path, nullptr);
    const auto back = load_manifest(dir / "manifest.csv", 32);
    ASSERT_EQ(back.size(), ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        EXPECT_EQ(back[i].identity_id, ds[i].identity_id);
        EXPECT_EQ(back[i].model_id, ds[i].model_id);
        for (std::size_t k = 0; k < ds[i].pixels.pixels.size(); ++k)
            ASSERT_NEAR(back[i].pixels.pixels[k], ds[i].pixels.pixels[k], 0.5 / 255 + 1e-6);
    }
}

TEST(Manifest, InconsistentHierarchyNamesIdentity) {
    TempDir dir;
    spit(dir / "m.csv", "path,model_id,identity_id\na.png,2,7\nb.png,5,7\n");
    try {
        read_manifest_rows(dir / "m.csv");
        FAIL();
    } catch (const Error& e) {
        EXPECT_STREQ(e.what(), "inconsistent hierarchy for identity 7");
    }
}

TEST(Manifest, EmptyManifestIsAnError) {
    TempDir dir;
    spit(dir / "m.csv", "path,model_id,identity_id\n");
    EXPECT_THROW(read_manifest_rows(dir / "m.csv"), Error);
    spit(dir / "n.csv", "");
    EXPECT_THROW(read_manifest_rows(dir / "n.csv"), Error);
}

TEST(Manifest, VehicleIdTrainingListIdentityCount) {
    // Runs only when a VehicleID training manifest is supplied.
    const char* path = std::getenv("PMSM_VEHICLEID_TRAIN_MANIFEST");
    if (!path) GTEST_SKIP() << "PMSM_VEHICLEID_TRAIN_MANIFEST not set";
    const auto rows = read_manifest_rows(path);
    std::set<int> ids;
    for (const auto& r : rows) ids.insert(r.identity_id);
    EXPECT_EQ(rows.size(), 113346u);
    EXPECT_EQ(ids.size(), 13164u);
}

TEST(Splits, RetrievalCounts) {
    const auto ds = grid_dataset(4, 3);
    const auto s = build_retrieval_split(ds, 4, 1);
    EXPECT_EQ(s.probe.size(), 4u);
    EXPECT_EQ(s.gallery.size(), 8u);
    std::set<int> probe_ids;
    for (auto i : s.probe) probe_ids.insert(ds[i].identity_id);
    EXPECT_EQ(probe_ids.size(), 4u);
    expect_split_partition(ds, s);
}

TEST(Splits, ReidIsExactExchange) {
    const auto ds = grid_dataset(4, 3);
    const auto r = build_retrieval_split(ds, 4, 9);
    const auto q = build_reid_split(ds, 4, 9);
    EXPECT_EQ(q.gallery.size(), 4u);
    EXPECT_EQ(q.probe.size(), 8u);
    EXPECT_EQ(q.probe, r.gallery);
    EXPECT_EQ(q.gallery, r.probe);
    EXPECT_EQ(q.mode, SplitMode::reid);
    EXPECT_EQ(exchange(q), r);
}

TEST(Splits, DeterministicGivenSeed) {
    const auto ds = grid_dataset(30, 4);
    EXPECT_EQ(build_retrieval_split(ds, 12, 5), build_retrieval_split(ds, 12, 5));
    EXPECT_NE(build_retrieval_split(ds, 12, 5), build_retrieval_split(ds, 12, 6));
}

TEST(Splits, PartitionPropertyOverRandomDatasets) {
    Rng rng(17);
    for (int trial = 0; trial < 100; ++trial) {
        Dataset ds;
        int sid = 0;
        const int ids = 2 + static_cast<int>(rand_below(rng, 20));
        for (int id = 0; id < ids; ++id) {
            const int n = 1 + static_cast<int>(rand_below(rng, 6));
            for (int k = 0; k < n; ++k) ds.images.push_back({Image(4, 4), 0, id, sid++});
        }
        const auto eligible = [&] {
            std::size_t e = 0;
            for (const auto& [id, imgs] : ds.images_by_identity()) e += imgs.size() >= 2;
            return e;
        }();
        if (eligible == 0) continue;
        const std::size_t n = 1 + rand_below(rng, eligible);
        std::vector<std::string> warnings;
        const auto s = build_retrieval_split(ds, n, rng(), &warnings);
        EXPECT_EQ(s.probe.size(), n);
        expect_split_partition(ds, s);
        const auto r = exchange(s);
        std::set<int> gallery_ids;
        for (auto i : r.gallery) gallery_ids.insert(ds[i].identity_id);
        EXPECT_EQ(gallery_ids.size(), r.gallery.size());  // one gallery image per identity
    }
}

TEST(Splits, SingleImageIdentitiesExcludedWithWarning) {
    auto ds = grid_dataset(3, 2);
    ds.images.push_back({Image(8, 8), 0, 99, 1000});
    std::vector<std::string> warnings;
    const auto s = build_retrieval_split(ds, 3, 1, &warnings);
    EXPECT_EQ(s.probe.size(), 3u);
    ASSERT_EQ(warnings.size(), 1u);
    EXPECT_THROW(build_retrieval_split(ds, 4, 1), Error);
}

TEST(Splits, HoldOutByIdentityIsDisjoint) {
    const auto ds = grid_dataset(20, 3);
    const auto [train, test] = split_by_identity(ds, 8, 4);
    EXPECT_EQ(test.num_identities(), 8u);
    EXPECT_EQ(train.num_identities(), 12u);
    for (const auto& a : train.images)
        for (const auto& b : test.images) EXPECT_NE(a.identity_id, b.identity_id);
}

TEST(Export, WritesManifestAndGroundTruth) {
    TempDir dir;
    const auto cfg = small_config();
    export_dataset(generate_synthetic(cfg), dir.path, &cfg);
    EXPECT_EQ(read_manifest_rows(dir / "manifest.csv").size(), 12u);
    const auto gt = nlohmann::json::parse(slurp(dir / "ground_truth.json"));
    EXPECT_EQ(rect_from_json(gt.at("identity_cue_region")), cfg.identity_cue_region);
    EXPECT_EQ(gt.at("identities").size(), 4u);
}
