#include <chrono>
#include <cstdio>
#include <functional>
#include <sstream>

#include "petlab/grad_check.hpp"
#include "petlab/petl.hpp"
#include "petlab/runner.hpp"

namespace petlab {

namespace {

using D = double;
using Setup = std::function<void(Rng&, std::vector<GradCheckParam<D>>&,
                                 std::function<Tensor<D>()>&)>;

Tensor<D> rand_t(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<D> t(std::move(shape));
    for (auto& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

Tensor<D> probed(const Tensor<D>& out, const Tensor<D>& probe) {
    return sum_all(mul(out, probe));
}

struct OpCheck {
    std::string name;
    Setup setup;
};

std::vector<OpCheck> op_checks() {
    std::vector<OpCheck> ops;
    auto add_op = [&](std::string name, Setup s) { ops.push_back({std::move(name), std::move(s)}); };

    add_op("add", [](Rng& rng, auto& params, auto& f) {
        auto a = rand_t({3, 4}, rng), b = rand_t({3, 4}, rng), pr = rand_t({3, 4}, rng);
        params = {{"a", a}, {"b", b}};
        f = [=] { return probed(add(a, b), pr); };
    });
    add_op("add_broadcast", [](Rng& rng, auto& params, auto& f) {
        auto a = rand_t({2, 3, 4}, rng), b = rand_t({3, 4}, rng), pr = rand_t({2, 3, 4}, rng);
        params = {{"a", a}, {"b", b}};
        f = [=] { return probed(add_broadcast(a, b), pr); };
    });
    add_op("mul", [](Rng& rng, auto& params, auto& f) {
        auto a = rand_t({3, 4}, rng), b = rand_t({3, 4}, rng), pr = rand_t({3, 4}, rng);
        params = {{"a", a}, {"b", b}};
        f = [=] { return probed(mul(a, b), pr); };
    });
    add_op("scale/add_const", [](Rng& rng, auto& params, auto& f) {
        auto a = rand_t({6}, rng), pr = rand_t({6}, rng);
        params = {{"a", a}};
        f = [=] { return probed(add_const(scale(a, 1.7), -0.3), pr); };
    });
    add_op("scale_by", [](Rng& rng, auto& params, auto& f) {
        auto a = rand_t({5}, rng), s = rand_t({1}, rng), pr = rand_t({5}, rng);
        params = {{"a", a}, {"s", s}};
        f = [=] { return probed(scale_by(a, s), pr); };
    });
    add_op("relu", [](Rng& rng, auto& params, auto& f) {
        auto a = rand_t({8}, rng), pr = rand_t({8}, rng);
        params = {{"a", a}};
        f = [=] { return probed(relu(a), pr); };
    });
    add_op("gelu", [](Rng& rng, auto& params, auto& f) {
        auto a = rand_t({8}, rng, -3.0, 3.0), pr = rand_t({8}, rng);
        params = {{"a", a}};
        f = [=] { return probed(gelu(a), pr); };
    });
    add_op("sigmoid", [](Rng& rng, auto& params, auto& f) {
        auto a = rand_t({8}, rng, -4.0, 4.0), pr = rand_t({8}, rng);
        params = {{"a", a}};
        f = [=] { return probed(sigmoid(a), pr); };
    });
    add_op("matmul", [](Rng& rng, auto& params, auto& f) {
        auto a = rand_t({3, 4}, rng), b = rand_t({4, 2}, rng), pr = rand_t({3, 2}, rng);
        params = {{"a", a}, {"b", b}};
        f = [=] { return probed(matmul(a, b), pr); };
    });
    add_op("matmul(batched)", [](Rng& rng, auto& params, auto& f) {
        auto a = rand_t({2, 3, 4}, rng), b = rand_t({2, 4, 2}, rng), pr = rand_t({2, 3, 2}, rng);
        params = {{"a", a}, {"b", b}};
        f = [=] { return probed(matmul(a, b), pr); };
    });
    add_op("matmul(shared rhs)", [](Rng& rng, auto& params, auto& f) {
        auto a = rand_t({2, 3, 4}, rng), w = rand_t({4, 2}, rng), pr = rand_t({2, 3, 2}, rng);
        params = {{"a", a}, {"w", w}};
        f = [=] { return probed(matmul(a, w), pr); };
    });
    add_op("linear", [](Rng& rng, auto& params, auto& f) {
        auto x = rand_t({2, 3, 4}, rng), w = rand_t({5, 4}, rng), b = rand_t({5}, rng);
        auto pr = rand_t({2, 3, 5}, rng);
        params = {{"x", x}, {"w", w}, {"b", b}};
        f = [=] { return probed(linear(x, w, b), pr); };
    });
    add_op("softmax", [](Rng& rng, auto& params, auto& f) {
        auto a = rand_t({3, 5}, rng, -2.0, 2.0), pr = rand_t({3, 5}, rng);
        params = {{"a", a}};
        f = [=] { return probed(softmax(a), pr); };
    });
    add_op("layer_norm", [](Rng& rng, auto& params, auto& f) {
        auto x = rand_t({3, 6}, rng), g = rand_t({6}, rng), b = rand_t({6}, rng);
        auto pr = rand_t({3, 6}, rng);
        params = {{"x", x}, {"g", g}, {"b", b}};
        f = [=] { return probed(layer_norm(x, g, b, 1e-6), pr); };
    });
    add_op("concat_seq/slice", [](Rng& rng, auto& params, auto& f) {
        auto a = rand_t({2, 3}, rng), b = rand_t({4, 3}, rng), pr = rand_t({3, 3}, rng);
        params = {{"a", a}, {"b", b}};
        f = [=] { return probed(slice(concat_seq<D>({a, b}), 0, 1, 3), pr); };
    });
    add_op("reshape/permute", [](Rng& rng, auto& params, auto& f) {
        auto a = rand_t({2, 3, 4}, rng), pr = rand_t({4, 2, 3}, rng);
        params = {{"a", a}};
        f = [=] { return probed(reshape(permute(a, {2, 0, 1}), {4, 2, 3}), pr); };
    });
    add_op("repeat_axis", [](Rng& rng, auto& params, auto& f) {
        auto a = rand_t({2, 1, 3}, rng), pr = rand_t({2, 4, 3}, rng);
        params = {{"a", a}};
        f = [=] { return probed(repeat_axis(a, 1, 4), pr); };
    });
    add_op("sum/mean", [](Rng& rng, auto& params, auto& f) {
        auto a = rand_t({3, 4}, rng);
        params = {{"a", a}};
        f = [=] { return add(sum_all(a), scale(mean_all(a), 2.0)); };
    });
    add_op("cross_entropy", [](Rng& rng, auto& params, auto& f) {
        auto logits = rand_t({3, 5}, rng, -2.0, 2.0);
        std::vector<int> labels{int(rng.below(5)), int(rng.below(5)), int(rng.below(5))};
        params = {{"logits", logits}};
        f = [=] { return cross_entropy(logits, labels); };
    });
    add_op("extract_patches", [](Rng& rng, auto& params, auto& f) {
        auto img = rand_t({2, 4, 4}, rng), pr = rand_t({4, 8}, rng);
        params = {{"img", img}};
        f = [=] { return probed(extract_patches(img, 2, 2), pr); };
    });
    return ops;
}

}  // namespace

GradcheckOutcome run_gradcheck_suite(const GradcheckOptions& opt) {
    const auto t0 = std::chrono::steady_clock::now();
    GradcheckOutcome outcome;
    std::ostringstream report;

    for (const auto& op : op_checks()) {
        Rng rng(derive_seed(opt.seed, std::hash<std::string>{}(op.name)));
        double worst = 0.0;
        bool ok = true;
        std::string detail;
        for (std::size_t c = 0; c < opt.op_cases && ok; ++c) {
            std::vector<GradCheckParam<D>> params;
            std::function<Tensor<D>()> f;
            op.setup(rng, params, f);
            for (auto& p : params) p.tensor.set_requires_grad(true);
            auto rep = grad_check<D>(f, params, 1e-6, opt.op_tol, 100, rng.next_u64());
            worst = std::max(worst, rep.worst_rel_error);
            if (!rep.passed) {
                ok = false;
                detail = rep.summary();
            }
        }
        char line[160];
        std::snprintf(line, sizeof(line), "op %-20s %s  (worst rel err %.3e, tol %.0e)\n",
                      op.name.c_str(), ok ? "PASS" : "FAIL", worst, opt.op_tol);
        report << line;
        if (!ok) {
            report << "  " << detail << "\n";
            outcome.passed = false;
        }
    }

    // end-to-end losses on the tiny config, >= coords_per_group sampled
    // coordinates per parameter group
    const ViTConfig cfg = ViTConfig::tiny();
    auto backbone = init_backbone<D>(cfg, derive_seed(opt.seed, 0xe2e));
    Rng img_rng(derive_seed(opt.seed, 0x1316));
    Tensor<D> image({1, cfg.image_channels, cfg.image_h, cfg.image_w});
    for (auto& v : image.values()) v = img_rng.uniform();
    std::vector<int> label{2};

    auto check_model = [&](const char* name, DownstreamModel<D>& model) {
        std::vector<GradCheckParam<D>> params;
        for (auto& p : model.params().all()) {
            if (p.trainable) params.push_back({p.name, p.value});
        }
        auto f = [&] { return cross_entropy(model.forward(image), label); };
        auto rep = grad_check<D>(f, params, 1e-5, opt.end_to_end_tol, opt.coords_per_group,
                                 derive_seed(opt.seed, std::hash<std::string>{}(name)));
        char line[160];
        std::snprintf(line, sizeof(line),
                      "model %-17s %s  (%zu coords, worst rel err %.3e, tol %.0e)\n", name,
                      rep.passed ? "PASS" : "FAIL", rep.coords_checked, rep.worst_rel_error,
                      opt.end_to_end_tol);
        report << line;
        if (!rep.passed) {
            report << "  " << rep.summary() << "\n";
            outcome.passed = false;
        }
    };

    {
        PETLMethodConfig m;
        m.kind = MethodKind::vpt;
        m.prompt_count = 3;
        auto model = build_method(m, backbone, cfg, 4, derive_seed(opt.seed, 0x11));
        check_model("vpt", model);
    }
    for (DvptMode mode : {DvptMode::shared, DvptMode::specific}) {
        PETLMethodConfig m;
        m.kind = MethodKind::dvpt;
        m.prompt_count = 3;
        m.metanet_layers = 2;
        m.dvpt_mode = mode;
        auto model = build_method(m, backbone, cfg, 4, derive_seed(opt.seed, 0x12));
        // randomize the zero-initialized final layer so the whole
        // Meta-Net participates in the check
        Rng rng(derive_seed(opt.seed, 0x13));
        const std::size_t last = m.metanet_layers - 1;
        for (auto& v : model.params()
                           .tensor("metanet.layer" + std::to_string(last) + ".weight")
                           .values()) {
            v = rng.uniform(-0.3, 0.3);
        }
        check_model(mode == DvptMode::shared ? "dvpt-shared" : "dvpt-specific", model);
    }

    outcome.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    outcome.report = report.str();
    return outcome;
}

}  // namespace petlab
