// Contrastive item alignment and pooled user representations: closed-form
// InfoNCE values, ordering invariance, encoder training behavior, and the
// recency-weighted user pooling rules.
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>
#include <vector>

#include "ltrec/align.hpp"
#include "ltrec/gradcheck.hpp"
#include "ltrec/synth.hpp"

using namespace ltrec;

namespace {

Value unit_vec(Graph& g, int dim, int axis) {
    Tensor t = Tensor::zeros(dim, 1);
    t.v[static_cast<size_t>(axis)] = 1.0;
    return g.input(std::move(t));
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        d += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return d / std::sqrt(na * nb);
}

}  // namespace

TEST_CASE("info_nce closed forms") {
    SECTION("no negatives means zero loss") {
        Graph g;
        AlignmentBatch b;
        b.tau = 0.5;
        b.anchors = {unit_vec(g, 3, 0)};
        b.positives = {unit_vec(g, 3, 0)};
        b.negatives = {{}};
        CHECK(info_nce(g, b).scalar() == 0.0);
    }
    SECTION("all similarities equal gives ln(1+K)") {
        for (int k : {1, 3, 7}) {
            Graph g;
            AlignmentBatch b;
            b.tau = 0.7;
            Value v = unit_vec(g, 4, 1);
            b.anchors = {v};
            b.positives = {v};
            b.negatives.push_back(std::vector<Value>(static_cast<size_t>(k), v));
            CHECK(info_nce(g, b).scalar() ==
                  Catch::Approx(std::log(1.0 + k)).margin(1e-12));
        }
    }
    SECTION("one orthogonal negative at unit temperature") {
        Graph g;
        AlignmentBatch b;
        b.tau = 1.0;
        b.anchors = {unit_vec(g, 2, 0)};
        b.positives = {unit_vec(g, 2, 0)};   // s+ = 1
        b.negatives = {{unit_vec(g, 2, 1)}}; // s- = 0
        CHECK(info_nce(g, b).scalar() ==
              Catch::Approx(-std::log(std::exp(1.0) / (std::exp(1.0) + 1.0))).margin(1e-12));
        CHECK(info_nce(g, b).scalar() == Catch::Approx(0.3133).margin(1e-4));
    }
    SECTION("invalid temperature rejected") {
        Graph g;
        AlignmentBatch b;
        b.tau = 0.0;
        b.anchors = {unit_vec(g, 2, 0)};
        b.positives = {unit_vec(g, 2, 0)};
        b.negatives = {{}};
        CHECK_THROWS_AS(info_nce(g, b), ConfigError);
    }
}

TEST_CASE("info_nce is bitwise invariant to negative ordering") {
    Rng rng(31);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> anchor = rng.gaussian_vec(5);
        std::vector<double> pos = rng.gaussian_vec(5);
        std::vector<std::vector<double>> negs;
        for (int k = 0; k < 6; ++k) negs.push_back(rng.gaussian_vec(5));

        auto run = [&](const std::vector<size_t>& order) {
            Graph g;
            AlignmentBatch b;
            b.tau = 0.3;
            Value a = g.input(Tensor::vec(anchor));
            b.anchors = {a};
            b.positives = {g.input(Tensor::vec(pos))};
            std::vector<Value> nv;
            for (size_t idx : order) nv.push_back(g.input(Tensor::vec(negs[idx])));
            b.negatives = {nv};
            Value loss = info_nce(g, b);
            g.backward(loss);
            std::pair<double, std::vector<double>> out{loss.scalar(), a.grad().v};
            return out;
        };
        std::vector<size_t> fwd(negs.size());
        std::iota(fwd.begin(), fwd.end(), 0);
        std::vector<size_t> rev(fwd.rbegin(), fwd.rend());
        Rng shuf(trial + 1000);
        std::vector<size_t> mixed = shuf.permutation(negs.size());

        auto base = run(fwd);
        for (const auto& other : {run(rev), run(mixed)}) {
            CHECK(other.first == base.first);  // loss is bitwise order-free
            REQUIRE(other.second.size() == base.second.size());
            for (size_t i = 0; i < base.second.size(); ++i)
                CHECK(other.second[i] ==
                      Catch::Approx(base.second[i]).epsilon(1e-12).margin(1e-15));
        }
    }
}

TEST_CASE("info_nce gradients match finite differences") {
    Rng rng(77);
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<Tensor> params;
        for (int i = 0; i < 5; ++i) params.push_back(Tensor::vec(rng.gaussian_vec(4)));
        GradCheckResult r = finite_difference_check(
            [](Graph& g, const std::vector<Value>& l) {
                AlignmentBatch b;
                b.tau = 0.4;
                b.anchors = {l[0], l[1]};
                b.positives = {l[2], l[3]};
                b.negatives = {{l[3], l[4]}, {l[2], l[4]}};
                return info_nce(g, b);
            },
            params);
        CHECK(r.max_rel_err < 1e-4);
    }
}

TEST_CASE("item encoder training") {
    DatasetConfig dc;
    dc.num_users = 80;
    dc.num_items = 60;
    dc.num_categories = 4;
    dc.d_lat = 8;
    dc.num_events = 4000;
    dc.num_days = 4;
    dc.test_days = 1;
    dc.noise_sigma = 0.0;
    auto items = generate_catalog(dc, 5);
    auto users = generate_users(dc, 5);
    auto events = generate_interactions(items, users, dc, 5);
    auto [train, test] = time_split(events, dc.num_days, dc.test_days);
    auto pairs = extract_cooccurrence(train, dc.cooc_window, dc.cooc_min_count);
    REQUIRE_FALSE(pairs.empty());

    AlignConfig ac;
    ac.d_rep = 8;
    ac.hidden = 16;
    ac.epochs = 4;

    SECTION("zero epochs returns normalized initialization outputs") {
        AlignConfig a0 = ac;
        a0.epochs = 0;
        auto res = train_item_encoder(items, pairs, a0, 9);
        CHECK(res.epoch_losses.empty());
        for (const auto& [id, rep] : res.items.reps) {
            double n = 0;
            for (double x : rep) n += x * x;
            CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-9);
        }
    }
    SECTION("training separates co-occurring pairs from random ones") {
        auto res = train_item_encoder(items, pairs, ac, 9);
        double co = 0.0;
        for (const auto& p : pairs) co += cosine(res.items.rep(p.a), res.items.rep(p.b));
        co /= static_cast<double>(pairs.size());
        Rng rng(123);
        double rnd = 0.0;
        int m = 500;
        for (int k = 0; k < m; ++k) {
            int a = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(items.size())));
            int b = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(items.size())));
            if (a == b) { --k; continue; }
            rnd += cosine(res.items.rep(a), res.items.rep(b));
        }
        rnd /= m;
        INFO("cooccurring " << co << " random " << rnd);
        CHECK(co > rnd);
    }
    SECTION("same mixture component ends closer than cross-component") {
        auto res = train_item_encoder(items, pairs, ac, 9);
        double same = 0, cross = 0;
        int ns = 0, nc = 0;
        for (size_t i = 0; i < items.size(); ++i)
            for (size_t j = i + 1; j < items.size(); ++j) {
                double c = cosine(res.items.rep(items[i].id), res.items.rep(items[j].id));
                if (items[i].category == items[j].category) { same += c; ++ns; }
                else { cross += c; ++nc; }
            }
        REQUIRE(ns > 0);
        REQUIRE(nc > 0);
        CHECK(same / ns > cross / nc);
    }
    SECTION("identical seeds give identical reps") {
        auto r1 = train_item_encoder(items, pairs, ac, 9);
        auto r2 = train_item_encoder(items, pairs, ac, 9);
        CHECK(r1.items.reps == r2.items.reps);
        CHECK(r1.epoch_losses == r2.epoch_losses);
    }
    SECTION("no pairs raises the skip signal") {
        CHECK_THROWS_AS(train_item_encoder(items, {}, ac, 9), AlignmentSkipped);
    }
    SECTION("passthrough reps are unit-norm copies of content") {
        auto store = passthrough_item_reps(items);
        for (const auto& it : items) {
            CHECK(cosine(store.rep(it.id), it.content_rep) == Catch::Approx(1.0).margin(1e-9));
        }
    }
}

TEST_CASE("user representation pooling") {
    // Orthonormal item reps make pooled weights directly observable.
    SemanticRepStore istore;
    istore.kind = "item";
    istore.dim = 4;
    for (int i = 0; i < 4; ++i) {
        std::vector<double> v(4, 0.0);
        v[static_cast<size_t>(i)] = 1.0;
        istore.reps[i] = v;
    }

    SECTION("single click copies that item's rep") {
        UserRecord u;
        u.id = 0;
        u.history = {{2, 10}};
        auto store = derive_user_reps({u}, istore);
        CHECK(store.rep(0) == istore.rep(2));
    }
    SECTION("decay 1 weights two clicks equally") {
        UserRecord u;
        u.id = 0;
        u.history = {{0, 1}, {1, 2}};
        auto store = derive_user_reps({u}, istore, 1.0);
        CHECK(store.rep(0)[0] == Catch::Approx(1.0 / std::sqrt(2.0)).margin(1e-12));
        CHECK(store.rep(0)[1] == Catch::Approx(1.0 / std::sqrt(2.0)).margin(1e-12));
    }
    SECTION("decay 0.5 over three clicks weights (0.25, 0.5, 1)/1.75") {
        UserRecord u;
        u.id = 0;
        u.history = {{0, 1}, {1, 2}, {2, 3}};
        auto store = derive_user_reps({u}, istore, 0.5);
        const auto& r = store.rep(0);
        double scale = std::sqrt(0.25 * 0.25 + 0.5 * 0.5 + 1.0) / 1.75;
        CHECK(r[0] == Catch::Approx(0.25 / 1.75 / scale).margin(1e-12));
        CHECK(r[1] == Catch::Approx(0.5 / 1.75 / scale).margin(1e-12));
        CHECK(r[2] == Catch::Approx(1.0 / 1.75 / scale).margin(1e-12));
    }
    SECTION("clicks on or after the boundary are excluded") {
        UserRecord u;
        u.id = 0;
        u.history = {{0, 1}, {3, 50}};
        auto store = derive_user_reps({u}, istore, 0.5, 50);
        CHECK(store.rep(0) == istore.rep(0));
    }
    SECTION("empty history falls back to the normalized profile") {
        UserRecord u;
        u.id = 0;
        u.profile = {3.0, 4.0, 0.0, 0.0};
        auto store = derive_user_reps({u}, istore);
        CHECK(store.rep(0)[0] == Catch::Approx(0.6).margin(1e-12));
        CHECK(store.rep(0)[1] == Catch::Approx(0.8).margin(1e-12));
    }
    SECTION("all outputs are unit norm") {
        Rng rng(4);
        std::vector<UserRecord> users;
        for (int uid = 0; uid < 20; ++uid) {
            UserRecord u;
            u.id = uid;
            u.profile = rng.gaussian_vec(4);
            int h = static_cast<int>(rng.uniform_int(5));
            for (int k = 0; k < h; ++k)
                u.history.push_back({static_cast<int>(rng.uniform_int(4)), k});
            users.push_back(u);
        }
        auto store = derive_user_reps(users, istore, 0.7);
        for (const auto& [id, rep] : store.reps) {
            double n = 0;
            for (double x : rep) n += x * x;
            CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-9);
        }
    }
    SECTION("invalid decay rejected") {
        CHECK_THROWS_AS(derive_user_reps({}, istore, 0.0), ConfigError);
        CHECK_THROWS_AS(derive_user_reps({}, istore, 1.5), ConfigError);
    }
}
