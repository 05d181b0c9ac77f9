#include <benchmark/benchmark.h>

#include "moeflow/moe_block.hpp"
#include "moeflow/rng.hpp"

namespace {

using namespace moeflow;

struct Fixture {
    MoEConfig cfg;
    MoEWeights32 w;
    RouterState state;
    Tensor32 tokens;
    RoutingDecision decision;

    Fixture(std::size_t T, std::size_t n_routed, std::size_t top_k) {
        // Large enough that the expert weight set outruns L2: the grouped path
        // streams each expert once per pass, the naive loop re-reads weights
        // per token.
        cfg.d_model = 256;
        cfg.n_routed = n_routed;
        cfg.top_k = top_k;
        cfg.d_expert = 128;
        Rng rng(42);
        auto fill = [&](std::size_t r, std::size_t c) {
            Tensor32 t({r, c});
            const double s = 1.0 / std::sqrt(double(r));
            for (std::size_t i = 0; i < t.size(); ++i) t[i] = float(s * rng.normal());
            return t;
        };
        for (std::size_t e = 0; e < cfg.n_routed; ++e)
            w.routed.push_back({fill(cfg.d_model, cfg.d_expert), fill(cfg.d_expert, cfg.d_model)});
        for (std::size_t e = 0; e < cfg.n_shared; ++e)
            w.shared.push_back({fill(cfg.d_model, cfg.shared_width()),
                                fill(cfg.shared_width(), cfg.d_model)});
        state = RouterState::init(cfg.router_config(), rng);
        tokens = fill(T, cfg.d_model);
        decision = route(tokens.cast<double>(), state, cfg.router_config());
    }
};

void BM_grouped_mixture(benchmark::State& st) {
    Fixture f(std::size_t(st.range(0)), 16, 4);
    for (auto _ : st) {
        Tensor32 out = moe_mixture(f.tokens, f.w, f.decision, f.cfg);
        benchmark::DoNotOptimize(out.data());
    }
    st.SetItemsProcessed(st.iterations() * st.range(0));
}

void BM_naive_mixture(benchmark::State& st) {
    Fixture f(std::size_t(st.range(0)), 16, 4);
    for (auto _ : st) {
        Tensor32 out = reference_mixture(f.tokens, f.w, f.decision, f.cfg);
        benchmark::DoNotOptimize(out.data());
    }
    st.SetItemsProcessed(st.iterations() * st.range(0));
}

BENCHMARK(BM_grouped_mixture)->Arg(512)->Arg(4096)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_naive_mixture)->Arg(512)->Arg(4096)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
