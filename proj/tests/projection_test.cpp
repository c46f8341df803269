#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "mpum/gradcheck.hpp"
#include "mpum/projection.hpp"

using namespace mpum;

namespace {

Mat random_invertible(int64_t n, Rng& rng) {
    Mat p(n, n);
    for (auto& v : p.v) v = rng.uniform(-1.0, 1.0);
    for (int64_t i = 0; i < n; ++i) p.at(i, i) += 3.0;  // diagonally dominant
    return p;
}

Tensor<double> tensor_of(const Mat& m, bool rg = false) {
    return Tensor<double>::from({m.rows, m.cols}, m.v, rg);
}

}  // namespace

TEST_CASE("project_latent with identity projection returns the latents") {
    Rng rng(1);
    LatentTable<double> t = LatentTable<double>::random({"a", "b", "c"}, 4, rng);
    ProjectionSet<double> proj;
    Mat eye(4, 4);
    for (int i = 0; i < 4; ++i) eye.at(i, i) = 1.0;
    proj.modality.emplace("CT", tensor_of(eye));
    Graph<double> g;
    auto m = project_latent(g, t, proj, "CT");
    for (size_t i = 0; i < m.values().size(); ++i) CHECK(m.values()[i] == doctest::Approx(t.latents.values()[i]));
    CHECK_THROWS_AS(project_latent(g, t, proj, "MR"), DataError);
}

TEST_CASE("project_latent matches a hand matmul") {
    LatentTable<double> t;
    t.category_names = {"only"};
    t.latents = Tensor<double>::from({1, 2}, {1.0, 2.0}, true);
    ProjectionSet<double> proj;
    proj.modality.emplace("CT", Tensor<double>::from({2, 3}, {1, 0, 1, 0, 1, 1}));
    Graph<double> g;
    auto m = project_latent(g, t, proj, "CT");
    CHECK(m.values()[0] == doctest::Approx(1.0));
    CHECK(m.values()[1] == doctest::Approx(2.0));
    CHECK(m.values()[2] == doctest::Approx(3.0));
}

TEST_CASE("gradient flows through project_latent to the latents") {
    Rng rng(2);
    LatentTable<double> t = LatentTable<double>::random({"a", "b"}, 5, rng);
    ProjectionSet<double> proj;
    proj.add_modality("CT", 5, 3, rng);
    auto res = grad_check<double>(
        [&](Graph<double>& g) {
            auto m = project_latent(g, t, proj, "CT");
            return sum_all(g, mul(g, m, m));
        },
        {t.latents, proj.modality.at("CT")});
    CHECK(res.max_rel_err <= 1e-6);
}

TEST_CASE("reconstruct_latent inverts square projections") {
    Rng rng(3);
    const int64_t d = 6;
    for (int trial = 0; trial < 20; ++trial) {
        Mat p = random_invertible(d, rng);
        std::vector<double> t_true(static_cast<size_t>(d));
        for (auto& v : t_true) v = rng.uniform(-2.0, 2.0);
        // m = t . P
        std::vector<double> m(static_cast<size_t>(d), 0.0);
        for (int64_t j = 0; j < d; ++j)
            for (int64_t i = 0; i < d; ++i) m[static_cast<size_t>(j)] += t_true[static_cast<size_t>(i)] * p.at(i, j);
        auto t = reconstruct_latent(m, p, 0.0);
        for (int64_t i = 0; i < d; ++i)
            CHECK(std::abs(t[static_cast<size_t>(i)] - t_true[static_cast<size_t>(i)]) <= 1e-9);
    }
}

TEST_CASE("reconstruct_latent identity and degenerate cases") {
    Mat eye(3, 3);
    for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
    auto t = reconstruct_latent({1.0, 2.0, 3.0}, eye, 0.0);
    CHECK(t[0] == doctest::Approx(1.0));
    CHECK(t[2] == doctest::Approx(3.0));

    Mat rank1(2, 2);
    rank1.at(0, 0) = 1.0;
    rank1.at(0, 1) = 2.0;
    rank1.at(1, 0) = 2.0;
    rank1.at(1, 1) = 4.0;
    CHECK_THROWS_AS(reconstruct_latent({1.0, 1.0}, rank1, 0.0), NumericError);
    // ridge makes it solvable
    CHECK_NOTHROW(reconstruct_latent({1.0, 1.0}, rank1, 1e-6));
    CHECK_THROWS_AS(reconstruct_latent({1.0}, eye, 0.0), ShapeError);
}

TEST_CASE("aggregate_external recovers a known latent table") {
    Rng rng(4);
    const int64_t d_T = 5;
    const std::vector<std::string> names = {"x", "y", "z"};
    Mat t_true(3, d_T);
    for (auto& v : t_true.v) v = rng.uniform(-1.0, 1.0);

    ProjectionSet<double> proj;
    std::vector<ExternalEmbeddingSet<double>> sets;
    for (int s = 0; s < 2; ++s) {
        Mat p = random_invertible(d_T, rng);
        Mat m = matmul(t_true, p);  // [3, d_T]
        ExternalEmbeddingSet<double> set;
        set.source_id = "src" + std::to_string(s);
        set.dim = d_T;
        for (int c = 0; c < 3; ++c) {
            std::vector<double> row(static_cast<size_t>(d_T));
            for (int64_t j = 0; j < d_T; ++j) row[static_cast<size_t>(j)] = m.at(c, j);
            set.rows.emplace(names[static_cast<size_t>(c)], std::move(row));
        }
        proj.external.emplace(set.source_id, tensor_of(p));
        sets.push_back(std::move(set));
    }

    auto table = aggregate_external(sets, proj, names, 0.0);
    CHECK(table.num_categories() == 3);
    CHECK(table.latent_dim() == d_T);
    for (size_t i = 0; i < table.latents.values().size(); ++i)
        CHECK(std::abs(table.latents.values()[i] - t_true.v[i]) <= 1e-8);

    // order of sources does not matter
    std::swap(sets[0], sets[1]);
    auto table2 = aggregate_external(sets, proj, names, 0.0);
    for (size_t i = 0; i < table.latents.values().size(); ++i)
        CHECK(table2.latents.values()[i] == doctest::Approx(table.latents.values()[i]).epsilon(1e-12));

    // two identical sets behave like one
    std::vector<ExternalEmbeddingSet<double>> twice = {sets[0], sets[0]};
    auto once = aggregate_external({sets[0]}, proj, names, 0.0);
    auto dup = aggregate_external(twice, proj, names, 0.0);
    for (size_t i = 0; i < once.latents.values().size(); ++i)
        CHECK(dup.latents.values()[i] == doctest::Approx(once.latents.values()[i]).epsilon(1e-12));

    // missing category
    sets[0].rows.erase("y");
    CHECK_THROWS_AS(aggregate_external(sets, proj, names, 0.0), DataError);
}

TEST_CASE("generate_kernels shape and zero propagation") {
    Rng rng(5);
    FeatureOperatorGenerator<double> fog = FeatureOperatorGenerator<double>::init(4, 16, {8, 12}, rng);
    Graph<double> g;
    auto mf = Tensor<double>::randn({3, 4}, rng, 1.0, false);
    auto k0 = generate_kernels(g, mf, fog, 0);
    CHECK(k0.shape() == Shape{3, 8, 3, 3, 3});
    auto k1 = generate_kernels(g, mf, fog, 1);
    CHECK(k1.shape() == Shape{3, 12, 3, 3, 3});
    CHECK_THROWS_AS(generate_kernels(g, mf, fog, 2), DataError);

    // zero features with zero biases give zero kernels
    auto zf = Tensor<double>::zeros({3, 4});
    auto kz = generate_kernels(g, zf, fog, 0);
    for (double v : kz.values()) CHECK(v == 0.0);
}

TEST_CASE("distinct modality projections give distinct kernels") {
    Rng rng(6);
    LatentTable<double> t = LatentTable<double>::random({"a", "b"}, 6, rng, 0.5);
    ProjectionSet<double> proj;
    proj.add_modality("CT", 6, 4, rng);
    proj.add_modality("MR", 6, 4, rng);
    FeatureOperatorGenerator<double> fog = FeatureOperatorGenerator<double>::init(4, 16, {8}, rng);
    Graph<double> g;
    auto kct = generate_kernels(g, project_latent(g, t, proj, "CT"), fog, 0);
    auto kmr = generate_kernels(g, project_latent(g, t, proj, "MR"), fog, 0);
    double maxdiff = 0;
    for (size_t i = 0; i < kct.values().size(); ++i)
        maxdiff = std::max(maxdiff, std::abs(kct.values()[i] - kmr.values()[i]));
    CHECK(maxdiff > 0.0);
}

TEST_CASE("end-to-end gradient: latents -> projection -> FOG -> conv3d") {
    Rng rng(7);
    LatentTable<double> t = LatentTable<double>::random({"a", "b"}, 4, rng, 0.5);
    ProjectionSet<double> proj;
    proj.add_modality("CT", 4, 3, rng);
    FeatureOperatorGenerator<double> fog = FeatureOperatorGenerator<double>::init(3, 8, {2}, rng);
    auto x = Tensor<double>::randn({1, 2, 4, 4, 4}, rng, 1.0, false);

    auto res = grad_check<double>(
        [&](Graph<double>& g) {
            auto mf = project_latent(g, t, proj, "CT");
            auto k = generate_kernels(g, mf, fog, 0);
            // categories become output channels: [C,H,3,3,3] vs input [1,H,...]
            auto y = conv3d(g, x, k, 1, 1);
            return sum_all(g, mul(g, y, y));
        },
        {t.latents, proj.modality.at("CT"), fog.stages[0].w1, fog.stages[0].b1, fog.stages[0].w2,
         fog.stages[0].b2});
    CHECK(res.max_rel_err <= 1e-4);
}

TEST_CASE("load_external_embeddings validates strictly") {
    const std::string good = "/tmp/mpum_emb_good.json";
    {
        std::ofstream f(good);
        f << R"({"source_id":"clip","dim":2,"embeddings":{"liver":[1.0,2.0],"spleen":[3.0,4.0]}})";
    }
    auto set = load_external_embeddings(good);
    CHECK(set.source_id == "clip");
    CHECK(set.dim == 2);
    CHECK(set.rows.at("liver")[1] == doctest::Approx(2.0));

    const std::string bad = "/tmp/mpum_emb_bad.json";
    {
        std::ofstream f(bad);
        f << R"({"source_id":"clip","dim":3,"embeddings":{"liver":[1.0,2.0]}})";
    }
    CHECK_THROWS_AS(load_external_embeddings(bad), FormatError);
    CHECK_THROWS_AS(load_external_embeddings("/tmp/does_not_exist.json"), DataError);
    const std::string garbage = "/tmp/mpum_emb_garbage.json";
    {
        std::ofstream f(garbage);
        f << "not json at all {";
    }
    CHECK_THROWS_AS(load_external_embeddings(garbage), FormatError);
    std::remove(good.c_str());
    std::remove(bad.c_str());
    std::remove(garbage.c_str());
}
