// Tests for the dual embedding tables, the asymmetric transfer objective,
// the orthogonality penalty, and the activity-gated fusion.
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <vector>

#include "ltrec/cgae.hpp"
#include "ltrec/gradcheck.hpp"
#include "ltrec/rng.hpp"

using namespace ltrec;
using Catch::Approx;

namespace {

std::map<int, SemanticID> tiny_id_map() {
    std::map<int, SemanticID> ids;
    ids[10] = SemanticID{{1, 2}};
    ids[20] = SemanticID{{1, 2}};  // aliases entity 10's cluster row
    ids[30] = SemanticID{{2, 1}};
    return ids;
}

}  // namespace

TEST_CASE("entities sharing a full identifier share one cluster row") {
    Rng rng(1);
    std::vector<int> ids{10, 20, 30};
    DualEmbedding emb(ids, tiny_id_map(), 4, 0.01, true, true, rng);

    CHECK(emb.cluster_row(10) == emb.cluster_row(20));
    CHECK(emb.cluster_row(10) != emb.cluster_row(30));
    CHECK(emb.entity_row(10) != emb.entity_row(20));
    CHECK(emb.num_clusters() == 2);
    CHECK(emb.num_entities() == 3);
    CHECK(emb.key_of(20) == std::vector<int>{1, 2});
    CHECK(emb.param_count() == 2 * 4 + 3 * 4);
    CHECK(emb.has_cluster());
    CHECK(emb.has_individual());

    SECTION("unknown entities and missing identifiers are loud errors") {
        CHECK_THROWS_AS(emb.entity_row(99), LookupError);
        CHECK_THROWS_AS(emb.key_of(99), LookupError);
        std::vector<int> extra{10, 20, 30, 40};  // 40 has no semantic id
        CHECK_THROWS_AS(DualEmbedding(extra, tiny_id_map(), 4, 0.01, true, true, rng),
                        LookupError);
    }

    SECTION("zero init scale produces all-zero rows") {
        Rng r2(2);
        DualEmbedding z(ids, tiny_id_map(), 3, 0.0, true, true, r2);
        for (int row = 0; row < z.num_clusters(); ++row)
            for (double v : z.cluster_table().row(row).v) CHECK(v == 0.0);
        for (int row = 0; row < z.num_entities(); ++row)
            for (double v : z.indiv_table().row(row).v) CHECK(v == 0.0);
    }

    SECTION("single-table assemblies refuse access to the missing side") {
        Rng r2(3);
        DualEmbedding only_c(ids, tiny_id_map(), 4, 0.01, true, false, r2);
        CHECK_NOTHROW(only_c.cluster_table());
        CHECK_THROWS_AS(only_c.indiv_table(), ConfigError);
        CHECK(only_c.param_count() == 2 * 4);
        DualEmbedding only_d(ids, tiny_id_map(), 4, 0.01, false, true, r2);
        CHECK_THROWS_AS(only_d.cluster_table(), ConfigError);
        CHECK(only_d.param_count() == 3 * 4);
        CHECK_THROWS_AS(DualEmbedding(ids, tiny_id_map(), 4, 0.01, false, false, r2),
                        ConfigError);
    }
}

TEST_CASE("batch cache deduplicates rows so gradient accumulates across uses") {
    Rng rng(7);
    EmbeddingTable table(3, 3, 0.5, rng);
    Tensor before0 = table.row(0);
    Tensor before2 = table.row(2);

    SECTION("two lookups of one row share a leaf; backward sums both uses") {
        Graph g;
        EmbeddingBatchCache cache(g, true);
        Value v1 = cache.use(table, 0);
        Value v2 = cache.use(table, 0);
        Value other = cache.use(table, 1);
        Value w = g.constant(Tensor::vec({1, 1, 1}));
        Value loss = add(add(dot(v1, w), dot(v2, w)), dot(other, w));
        g.backward(loss);
        for (double gv : v1.grad().v) CHECK(gv == 2.0);
        for (double gv : other.grad().v) CHECK(gv == 1.0);

        AdamConfig adam;
        CHECK(cache.apply(adam) == 0);
        // Touched rows moved, untouched row is bitwise unchanged.
        bool moved = false;
        for (int i = 0; i < 3; ++i)
            if (table.row(0).v[static_cast<size_t>(i)] != before0.v[static_cast<size_t>(i)])
                moved = true;
        CHECK(moved);
        for (int i = 0; i < 3; ++i)
            CHECK(table.row(2).v[static_cast<size_t>(i)] == before2.v[static_cast<size_t>(i)]);
    }

    SECTION("frozen cache serves constants and apply is a no-op") {
        Graph g;
        EmbeddingBatchCache cache(g, false);
        Value v = cache.use(table, 0);
        Value loss = dot(v, g.constant(Tensor::vec({1, 1, 1})));
        g.backward(loss);
        AdamConfig adam;
        CHECK(cache.apply(adam) == 0);
        for (int i = 0; i < 3; ++i)
            CHECK(table.row(0).v[static_cast<size_t>(i)] == before0.v[static_cast<size_t>(i)]);
    }
}

TEST_CASE("orthogonality penalty closed forms and invariances") {
    SECTION("orthogonal, parallel, and 45-degree pairs") {
        Graph g;
        Value zero_case = ortho_loss(g.input(Tensor::vec({1, 0})), g.input(Tensor::vec({0, 1})));
        CHECK(zero_case.scalar() == 0.0);
        Value one_case = ortho_loss(g.input(Tensor::vec({1, 1})), g.input(Tensor::vec({1, 1})));
        CHECK(one_case.scalar() == Approx(1.0).margin(1e-12));
        Value half_case = ortho_loss(g.input(Tensor::vec({1, 0})), g.input(Tensor::vec({1, 1})));
        CHECK(half_case.scalar() == Approx(0.5).margin(1e-12));
    }

    SECTION("always inside [0,1] and invariant to positive rescaling") {
        Rng rng(11);
        for (int t = 0; t < 1000; ++t) {
            Graph g;
            Tensor c = Tensor::vec(rng.gaussian_vec(5, 0.0, 1.0));
            Tensor d = Tensor::vec(rng.gaussian_vec(5, 0.0, 1.0));
            double base = ortho_loss(g.input(c), g.input(d)).scalar();
            CHECK(base >= 0.0);
            CHECK(base <= 1.0 + 1e-12);
            double a = 0.004 + 300.0 * rng.uniform();
            double b = 0.004 + 300.0 * rng.uniform();
            Tensor cs = c, ds = d;
            for (auto& x : cs.v) x *= a;
            for (auto& x : ds.v) x *= b;
            double scaled = ortho_loss(g.input(cs), g.input(ds)).scalar();
            CHECK(std::abs(scaled - base) < 1e-9);
        }
    }

    SECTION("degenerate inputs return exact zero with the flag set") {
        Graph g;
        bool flag = true;
        Value both = ortho_loss(g.input(Tensor::zeros(3, 1)), g.input(Tensor::zeros(3, 1)),
                                1e-8, &flag);
        CHECK(both.scalar() == 0.0);
        CHECK(flag);
        Value one_side = ortho_loss(g.input(Tensor::zeros(3, 1)),
                                    g.input(Tensor::vec({1, 0, 0})), 1e-8, &flag);
        CHECK(one_side.scalar() == 0.0);
        CHECK_FALSE(flag);
        CHECK_THROWS_AS(ortho_loss(g.input(Tensor::vec({1, 0})),
                                   g.input(Tensor::vec({1, 0, 0}))),
                        ShapeError);
    }

    SECTION("gradient matches finite differences") {
        Rng rng(13);
        for (int t = 0; t < 10; ++t) {
            Tensor c = Tensor::vec(rng.gaussian_vec(5, 0.0, 1.0));
            Tensor d = Tensor::vec(rng.gaussian_vec(5, 0.0, 1.0));
            GraphBuilder build = [](Graph&, const std::vector<Value>& leaves) {
                return ortho_loss(leaves[0], leaves[1]);
            };
            GradCheckResult res = finite_difference_check(build, {c, d});
            CHECK(res.max_rel_err < 1e-4);
        }
    }
}

TEST_CASE("activity gate mixes the two halves convexly") {
    SECTION("fixed mixing weights hit the boundary and midpoint cases") {
        Graph g;
        Value c = g.input(Tensor::vec({2, 0}));
        Value d = g.input(Tensor::vec({0, 2}));
        GateFuseResult all_c = gate_fuse_fixed(c, d, 1.0);
        CHECK(all_c.e.data().v[0] == 2.0);
        CHECK(all_c.e.data().v[1] == 0.0);
        GateFuseResult all_d = gate_fuse_fixed(c, d, 0.0);
        CHECK(all_d.e.data().v[0] == 0.0);
        CHECK(all_d.e.data().v[1] == 2.0);
        GateFuseResult mid = gate_fuse_fixed(c, d, 0.5);
        CHECK(mid.e.data().v[0] == 1.0);
        CHECK(mid.e.data().v[1] == 1.0);
        CHECK(mid.r.scalar() == 0.5);
    }

    SECTION("learned gate stays in (0,1) and output stays in the coordinate hull") {
        Rng rng(17);
        for (int t = 0; t < 200; ++t) {
            Mlp g1("gate", {3, 4, 1}, rng);
            Graph g;
            ParamContext ctx(g);
            Value c = g.input(Tensor::vec(rng.gaussian_vec(6, 0.0, 2.0)));
            Value d = g.input(Tensor::vec(rng.gaussian_vec(6, 0.0, 2.0)));
            std::vector<double> f_act{rng.gaussian(0.0, 2.0), rng.uniform(), rng.uniform()};
            GateFuseResult out = gate_fuse(ctx, g1, c, d, f_act);
            double r = out.r.scalar();
            CHECK(r > 0.0);
            CHECK(r < 1.0);
            for (int j = 0; j < 6; ++j) {
                double cj = c.data().v[static_cast<size_t>(j)];
                double dj = d.data().v[static_cast<size_t>(j)];
                double ej = out.e.data().v[static_cast<size_t>(j)];
                CHECK(ej >= std::min(cj, dj) - 1e-12);
                CHECK(ej <= std::max(cj, dj) + 1e-12);
            }
        }
    }

    SECTION("non-finite activity features are rejected") {
        Rng rng(19);
        Mlp g1("gate", {2, 1}, rng);
        Graph g;
        ParamContext ctx(g);
        Value c = g.input(Tensor::vec({1, 2}));
        Value d = g.input(Tensor::vec({3, 4}));
        CHECK_THROWS_AS(
            gate_fuse(ctx, g1, c, d, {1.0, std::numeric_limits<double>::quiet_NaN()}),
            DataError);
        CHECK_THROWS_AS(
            gate_fuse(ctx, g1, c, d, {std::numeric_limits<double>::infinity(), 0.0}),
            DataError);
    }

    SECTION("gradients reach both halves and the gate parameters") {
        Rng rng(23);
        Mlp g1("gate", {2, 3, 1}, rng);
        Graph g;
        ParamContext ctx(g);
        Value c = g.input(Tensor::vec({0.5, -1.0, 2.0}));
        Value d = g.input(Tensor::vec({1.5, 0.25, -0.75}));
        std::vector<double> f_act{0.3, -0.8};
        GateFuseResult out = gate_fuse(ctx, g1, c, d, f_act);
        Value loss = dot(out.e, g.constant(Tensor::vec({1, 1, 1})));
        g.backward(loss);

        double r = out.r.scalar();
        for (double gv : c.grad().v) CHECK(gv == Approx(r).margin(1e-15));
        for (double gv : d.grad().v) CHECK(gv == Approx(1.0 - r).margin(1e-15));

        // The context deduplicates blocks, so this returns the leaf built
        // inside the gate and its accumulated gradient.
        Value w0 = ctx.use(g1.weight(0));
        bool any = false;
        for (double gv : w0.grad().v)
            if (gv != 0.0) any = true;
        CHECK(any);

        // Analytic weight gradient vs central finite difference.
        for (int coord = 0; coord < 2; ++coord) {
            double analytic = w0.grad().v[static_cast<size_t>(coord)];
            double h = 1e-6;
            auto eval = [&](double delta) {
                Mlp g1p = g1;
                g1p.weight(0).value.v[static_cast<size_t>(coord)] += delta;
                Graph gg;
                ParamContext cc(gg);
                Value cp = gg.input(Tensor::vec({0.5, -1.0, 2.0}));
                Value dp = gg.input(Tensor::vec({1.5, 0.25, -0.75}));
                GateFuseResult o = gate_fuse(cc, g1p, cp, dp, f_act);
                return dot(o.e, gg.constant(Tensor::vec({1, 1, 1}))).scalar();
            };
            double numeric = (eval(h) - eval(-h)) / (2 * h);
            CHECK(analytic == Approx(numeric).margin(1e-5));
        }
    }
}

TEST_CASE("asymmetric transfer objective: worked values and pairing rules") {
    CgaeConfig cfg;
    cfg.lambda1 = 1.0;
    cfg.lambda2 = 1.0;
    cfg.tau_t = 1.0;
    const double one_term = std::log1p(std::exp(-1.0));  // -ln(e/(e+1))

    SECTION("one pair at the parent prefix plus one orthogonal negative") {
        Graph g;
        Rng rng(31);
        Value tail_c = g.input(Tensor::vec({1, 0}));
        Value head_c = g.input(Tensor::vec({1, 0}));
        Value neg_c = g.input(Tensor::vec({0, 1}));
        std::vector<TransferEntry> entries{
            {tail_c, true, 0, {1, 1}},
            {head_c, false, 1, {1, 2}},  // same parent prefix, different full id
            {neg_c, false, 2, {2, 1}},
        };
        TransferResult res = transfer_loss(g, entries, cfg, rng);
        CHECK(res.pairs == 1);
        CHECK(res.fallback_pairs == 1);
        CHECK_FALSE(res.no_pairs);
        CHECK(res.loss.scalar() == Approx(2.0 * one_term).margin(1e-12));
    }

    SECTION("pair inside one full cluster does not count as fallback") {
        Graph g;
        Rng rng(32);
        Value shared = g.input(Tensor::vec({1, 0}));  // aliased cluster row
        Value neg_c = g.input(Tensor::vec({0, 1}));
        std::vector<TransferEntry> entries{
            {shared, true, 0, {1, 1}},
            {shared, false, 0, {1, 1}},
            {neg_c, false, 1, {2, 1}},
        };
        TransferResult res = transfer_loss(g, entries, cfg, rng);
        CHECK(res.pairs == 1);
        CHECK(res.fallback_pairs == 0);
        CHECK(res.loss.scalar() == Approx(2.0 * one_term).margin(1e-12));
    }

    SECTION("unpairable tails are skipped; none at all yields an exact zero") {
        Graph g;
        Rng rng(33);
        Value a = g.input(Tensor::vec({1, 0}));
        Value b = g.input(Tensor::vec({0, 1}));
        Value c = g.input(Tensor::vec({1, 1}));
        std::vector<TransferEntry> pairable{
            {a, true, 0, {1, 1}},
            {b, true, 1, {9, 9}},  // no head shares its prefix
            {c, false, 2, {1, 1}},
        };
        TransferResult res = transfer_loss(g, pairable, cfg, rng);
        CHECK(res.pairs == 1);

        std::vector<TransferEntry> no_heads{
            {a, true, 0, {1, 1}},
            {b, true, 1, {2, 1}},
        };
        TransferResult none = transfer_loss(g, no_heads, cfg, rng);
        CHECK(none.no_pairs);
        CHECK(none.pairs == 0);
        CHECK(none.loss.scalar() == 0.0);
    }

    SECTION("tau must be positive") {
        Graph g;
        Rng rng(34);
        CgaeConfig bad = cfg;
        bad.tau_t = 0.0;
        CHECK_THROWS_AS(transfer_loss(g, {}, bad, rng), ConfigError);
        bad.tau_t = -0.5;
        CHECK_THROWS_AS(transfer_loss(g, {}, bad, rng), ConfigError);
    }

    SECTION("zero lambda on one side silences that side's gradient bitwise") {
        auto run_side = [&](double l1, double l2, bool expect_head_zero) {
            Graph g;
            Rng rng(35);
            Value tail_c = g.input(Tensor::vec({0.8, 0.6}));
            Value head_c = g.input(Tensor::vec({0.6, 0.8}));
            Value neg_c = g.input(Tensor::vec({-1.0, 0.3}));
            std::vector<TransferEntry> entries{
                {tail_c, true, 0, {1, 1}},
                {head_c, false, 1, {1, 2}},
                {neg_c, false, 2, {2, 1}},
            };
            CgaeConfig c2 = cfg;
            c2.lambda1 = l1;
            c2.lambda2 = l2;
            TransferResult res = transfer_loss(g, entries, c2, rng);
            REQUIRE(res.pairs == 1);
            g.backward(res.loss);
            const Tensor& head_grad = expect_head_zero ? head_c.grad() : tail_c.grad();
            const Tensor& live_grad = expect_head_zero ? tail_c.grad() : head_c.grad();
            for (double gv : head_grad.v) CHECK(gv == 0.0);
            bool any = false;
            for (double gv : live_grad.v)
                if (gv != 0.0) any = true;
            CHECK(any);
            // Negatives only ever appear behind stop-gradient.
            for (double gv : neg_c.grad().v) CHECK(gv == 0.0);
        };
        run_side(0.0, 1.0, true);   // heads silent
        run_side(1.0, 0.0, false);  // tails silent
    }

    SECTION("both lambdas zero: exact zero loss, pair bookkeeping intact") {
        Graph g;
        Rng rng(36);
        Value tail_c = g.input(Tensor::vec({1, 0}));
        Value head_c = g.input(Tensor::vec({0, 1}));
        std::vector<TransferEntry> entries{
            {tail_c, true, 0, {1, 1}},
            {head_c, false, 0, {1, 1}},
        };
        CgaeConfig c2 = cfg;
        c2.lambda1 = 0.0;
        c2.lambda2 = 0.0;
        TransferResult res = transfer_loss(g, entries, c2, rng);
        CHECK(res.pairs == 1);
        CHECK(res.loss.scalar() == 0.0);
    }

    SECTION("anchor-side gradient matches finite differences") {
        // Every embedding also appears behind stop-gradient as someone else's
        // positive or negative, and a full-batch finite difference would see
        // those paths while backward deliberately does not. So each direction
        // is probed with a single live anchor and everything else held fixed.
        for (int trial = 0; trial < 5; ++trial) {
            Rng init(41 + static_cast<uint64_t>(trial));
            Tensor anchor = Tensor::vec(init.gaussian_vec(4, 0.0, 1.0));
            std::vector<Tensor> fixed;
            for (int i = 0; i < 4; ++i)
                fixed.push_back(Tensor::vec(init.gaussian_vec(4, 0.0, 1.0)));

            // Tail-anchored direction: the lone tail is the only live leaf.
            CgaeConfig tail_cfg;
            tail_cfg.lambda1 = 0.0;
            tail_cfg.lambda2 = 1.0;
            tail_cfg.tau_t = 0.3;
            GraphBuilder tail_build = [&](Graph& g, const std::vector<Value>& leaves) {
                std::vector<TransferEntry> entries;
                entries.push_back({leaves[0], true, 0, {1, 1}});
                for (int i = 0; i < 4; ++i)
                    entries.push_back({g.input(fixed[static_cast<size_t>(i)]), false, i + 1,
                                       {i == 0 ? 1 : i + 1, 2}});
                Rng rng(7);
                return transfer_loss(g, entries, tail_cfg, rng).loss;
            };
            GradCheckResult tr = finite_difference_check(tail_build, {anchor});
            CHECK(tr.max_rel_err < 1e-4);

            // Head-anchored direction: the lone head is the only live leaf.
            CgaeConfig head_cfg;
            head_cfg.lambda1 = 1.0;
            head_cfg.lambda2 = 0.0;
            head_cfg.tau_t = 0.3;
            GraphBuilder head_build = [&](Graph& g, const std::vector<Value>& leaves) {
                std::vector<TransferEntry> entries;
                entries.push_back({g.input(fixed[0]), true, 0, {1, 1}});
                entries.push_back({leaves[0], false, 1, {1, 2}});
                for (int i = 1; i < 4; ++i)
                    entries.push_back({g.input(fixed[static_cast<size_t>(i)]), false, i + 1,
                                       {i + 1, 2}});
                Rng rng(7);
                return transfer_loss(g, entries, head_cfg, rng).loss;
            };
            GradCheckResult hr = finite_difference_check(head_build, {anchor});
            CHECK(hr.max_rel_err < 1e-4);
        }
    }
}

TEST_CASE("tail anchors receive more transfer gradient than heads on average") {
    CgaeConfig cfg;  // defaults: lambda1 = 0.1 < lambda2 = 1.0
    REQUIRE(cfg.lambda1 < cfg.lambda2);
    double tail_sum = 0.0, head_sum = 0.0;
    const int batches = 100;
    for (int b = 0; b < batches; ++b) {
        Rng rng(1000 + static_cast<uint64_t>(b));
        Graph g;
        std::vector<Value> tails, heads;
        std::vector<TransferEntry> entries;
        for (int k = 0; k < 4; ++k) {
            Value t = g.input(Tensor::vec(rng.gaussian_vec(8, 0.0, 1.0)));
            Value h = g.input(Tensor::vec(rng.gaussian_vec(8, 0.0, 1.0)));
            tails.push_back(t);
            heads.push_back(h);
            entries.push_back({t, true, 2 * k, {k + 1, 1}});
            entries.push_back({h, false, 2 * k + 1, {k + 1, 2}});
        }
        TransferResult res = transfer_loss(g, entries, cfg, rng);
        REQUIRE(res.pairs == 4);
        g.backward(res.loss);
        for (const Value& t : tails) tail_sum += std::sqrt(t.grad().squared_norm());
        for (const Value& h : heads) head_sum += std::sqrt(h.grad().squared_norm());
    }
    INFO("mean tail grad " << tail_sum / batches << " vs head " << head_sum / batches);
    CHECK(tail_sum / batches > head_sum / batches);
}
