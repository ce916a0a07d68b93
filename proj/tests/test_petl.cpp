#include <cstring>
#include <set>
#include <vector>

#include "doctest.h"
#include "petlab/grad_check.hpp"
#include "petlab/petl.hpp"
#include "petlab/vit.hpp"
#include "test_util.hpp"

using namespace petlab;
using petlab::test::bit_equal;
using petlab::test::max_abs_diff;

namespace {

ViTConfig desk_cfg() { return ViTConfig::desk_default(); }

Tensor<double> random_batch(const ViTConfig& cfg, std::size_t batch, std::uint64_t seed) {
    Rng rng(seed);
    Tensor<double> t({batch, cfg.image_channels, cfg.image_h, cfg.image_w});
    for (auto& v : t.values()) v = rng.uniform();
    return t;
}

std::set<std::string> trainable_names(const TrainableMask& mask) {
    std::set<std::string> names;
    for (const auto& [name, trainable] : mask) {
        if (trainable) names.insert(name);
    }
    return names;
}

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() &&
           s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

TEST_SUITE_BEGIN("petl");

TEST_CASE("linear method trains exactly the head") {
    auto cfg = desk_cfg();
    auto backbone = init_backbone<double>(cfg, 31);
    PETLMethodConfig m;
    m.kind = MethodKind::linear;
    auto model = build_method(m, backbone, cfg, 10, 7);
    auto names = trainable_names(model.mask());
    CHECK(names == std::set<std::string>{"head.weight", "head.bias"});

    // tiny-config head count: 10 * 32 + 10 = 330
    auto count = count_trainable(model);
    CHECK(count.total == 330);
    CHECK(count.by_group.at("head") == 330);
    CHECK(count.by_group.at("backbone") == 0);
}

TEST_CASE("bias method trains exactly the backbone bias/shift terms plus the new head") {
    auto cfg = desk_cfg();
    auto backbone = init_backbone<double>(cfg, 32);
    PETLMethodConfig m;
    m.kind = MethodKind::bias;
    auto model = build_method(m, backbone, cfg, 6, 8);

    std::set<std::string> expected_backbone;
    for (const auto& p : model.params().all()) {
        if (!is_backbone_param(p.name)) continue;
        if (ends_with(p.name, ".bias") || ends_with(p.name, ".shift")) {
            expected_backbone.insert(p.name);
        }
    }
    std::set<std::string> actual_backbone;
    for (const auto& [name, trainable] : model.mask()) {
        if (trainable && is_backbone_param(name)) actual_backbone.insert(name);
    }
    CHECK(actual_backbone == expected_backbone);
    CHECK(trainable_names(model.mask()).count("head.weight") == 1);
    CHECK(trainable_names(model.mask()).count("head.bias") == 1);
    // nothing else is trainable
    for (const auto& [name, trainable] : model.mask()) {
        if (!trainable) continue;
        CHECK((is_backbone_param(name) || name.rfind("head.", 0) == 0));
    }
}

TEST_CASE("partial-k trains the last k layers and the head") {
    auto cfg = desk_cfg();  // 4 layers
    auto backbone = init_backbone<double>(cfg, 33);
    PETLMethodConfig m;
    m.kind = MethodKind::partial_k;
    m.k = 2;
    auto model = build_method(m, backbone, cfg, 5, 9);
    for (const auto& [name, trainable] : model.mask()) {
        if (name.rfind("layer2.", 0) == 0 || name.rfind("layer3.", 0) == 0 ||
            name.rfind("head.", 0) == 0) {
            CHECK(trainable);
        } else {
            CHECK_FALSE(trainable);
        }
    }

    PETLMethodConfig bad = m;
    bad.k = 5;
    CHECK_THROWS_AS(build_method(bad, backbone, cfg, 5, 9), ConfigError);
}

TEST_CASE("dvpt trainable count matches the closed form and the mask-sum oracle") {
    auto cfg = desk_cfg();  // d=32, image 16x16 -> pooled input 48
    auto backbone = init_backbone<double>(cfg, 34);
    PETLMethodConfig m;
    m.kind = MethodKind::dvpt;
    m.prompt_count = 4;
    m.metanet_layers = 4;
    m.dvpt_mode = DvptMode::shared;
    auto model = build_method(m, backbone, cfg, 10, 10);

    const std::size_t closed_form = (48 * 32 + 32) + (32 * 32 + 32) * 2 + (32 * 32 + 32) +
                                    (4 * 32) + (10 * 32 + 10);
    CHECK(closed_form == 5194);

    // mask-enumeration oracle: sum sizes of trainable parameters by name
    std::size_t mask_sum = 0;
    for (const auto& p : model.params().all()) {
        if (p.trainable) mask_sum += p.value.size();
    }
    CHECK(mask_sum == closed_form);
    CHECK(count_trainable(model).total == closed_form);

    auto count = count_trainable(model);
    CHECK(count.by_group.at("prompts") == 4 * 32);
    CHECK(count.by_group.at("metanet") == 4736);
    CHECK(count.by_group.at("head") == 330);
    CHECK(count.by_group.at("backbone") == 0);
    CHECK(count.by_group.at("biases") == 0);
}

TEST_CASE("count_trainable: full covers every parameter; dvpt minus vpt is the Meta-Net") {
    auto cfg = desk_cfg();
    auto backbone = init_backbone<double>(cfg, 35);

    PETLMethodConfig full;
    full.kind = MethodKind::full;
    auto full_model = build_method(full, backbone, cfg, 10, 11);
    CHECK(count_trainable(full_model).total == full_model.params().total_size());

    PETLMethodConfig vpt;
    vpt.kind = MethodKind::vpt;
    vpt.prompt_count = 4;
    auto vpt_model = build_method(vpt, backbone, cfg, 10, 11);

    PETLMethodConfig dvpt = vpt;
    dvpt.kind = MethodKind::dvpt;
    dvpt.metanet_layers = 4;
    dvpt.dvpt_mode = DvptMode::shared;
    auto dvpt_model = build_method(dvpt, backbone, cfg, 10, 11);

    const std::size_t metanet_size = count_trainable(dvpt_model).by_group.at("metanet");
    CHECK(count_trainable(dvpt_model).total - count_trainable(vpt_model).total ==
          metanet_size);
}

TEST_CASE("vpt with all-zero prompts still differs from the plain backbone") {
    auto cfg = ViTConfig::tiny();
    auto backbone = init_backbone<double>(cfg, 36);
    Rng rng(37);
    Tensor<double> img({cfg.image_channels, cfg.image_h, cfg.image_w});
    for (auto& v : img.values()) v = rng.uniform();

    Tensor<double> zero_prompts({3, cfg.width});
    auto prompted = vpt_forward(img, backbone, cfg, zero_prompts);
    auto plain = vit_forward(img, backbone, cfg);
    CHECK(max_abs_diff(prompted.values(), plain.values()) > 1e-8);

    Tensor<double> empty(Shape{0, cfg.width});
    CHECK_THROWS_AS(vpt_forward(img, backbone, cfg, empty), ConfigError);
}

TEST_CASE("prompted forward carries 1+p+m tokens") {
    auto cfg = ViTConfig::tiny();
    auto backbone = init_backbone<double>(cfg, 38);
    PETLMethodConfig m;
    m.kind = MethodKind::vpt;
    m.prompt_count = 5;
    auto model = build_method(m, backbone, cfg, 4, 12);
    auto batch = random_batch(cfg, 2, 39);
    auto logits = model.forward(batch);
    CHECK(logits.shape() == Shape{2, 4});
    REQUIRE(model.last_prompt_tokens());
    CHECK(model.last_prompt_tokens()->shape == Shape{2, 5, cfg.width});
    CHECK(cfg.sequence_length(5) == 1 + 5 + cfg.patch_count());
}

TEST_CASE("meta_net zero final layer gives pi = 0 and dvpt == vpt bit-for-bit") {
    auto cfg = desk_cfg();
    auto backbone = init_backbone<double>(cfg, 40);
    PETLMethodConfig vm;
    vm.kind = MethodKind::vpt;
    vm.prompt_count = 4;
    auto vpt_model = build_method(vm, backbone, cfg, 6, 13);

    for (DvptMode mode : {DvptMode::shared, DvptMode::specific}) {
        PETLMethodConfig dm = vm;
        dm.kind = MethodKind::dvpt;
        dm.metanet_layers = 4;
        dm.dvpt_mode = mode;
        auto dvpt_model = build_method(dm, backbone, cfg, 6, 13);

        auto batch = random_batch(cfg, 3, 41);
        auto pi = meta_net_forward(dvpt_model.params(), pool_to_grid(batch),
                                   dm.metanet_layers, mode, dm.prompt_count, cfg.width);
        for (double v : pi.values()) CHECK(v == 0.0);

        auto lv = vpt_model.forward(batch);
        auto ld = dvpt_model.forward(batch);
        CHECK(bit_equal(lv.values(), ld.values()));
    }
}

TEST_CASE("shared mode broadcasts one d-vector to every prompt row") {
    auto cfg = desk_cfg();
    auto backbone = init_backbone<double>(cfg, 42);
    PETLMethodConfig m;
    m.kind = MethodKind::dvpt;
    m.prompt_count = 4;
    m.metanet_layers = 2;
    m.dvpt_mode = DvptMode::shared;
    auto model = build_method(m, backbone, cfg, 6, 14);
    // randomize the final layer so pi != 0
    Rng rng(43);
    for (auto& v : model.params().tensor("metanet.layer1.weight").values())
        v = rng.uniform(-0.5, 0.5);

    auto batch = random_batch(cfg, 2, 44);
    auto pooled = pool_to_grid(batch);
    auto pi = meta_net_forward(model.params(), pooled, 2, DvptMode::shared, 4, cfg.width);
    CHECK(pi.shape() == Shape{2, cfg.width});

    auto combined = combine_prompts(model.params().tensor("prompts"), pi, DvptMode::shared, 2);
    CHECK(combined.shape() == Shape{2, 4, cfg.width});
    const auto& prompts = model.params().tensor("prompts");
    for (std::size_t b = 0; b < 2; ++b) {
        for (std::size_t r = 0; r < 4; ++r) {
            for (std::size_t j = 0; j < cfg.width; ++j) {
                const double delta =
                    combined.values()[(b * 4 + r) * cfg.width + j] -
                    prompts.values()[r * cfg.width + j];
                CHECK(delta == doctest::Approx(pi.values()[b * cfg.width + j]).epsilon(1e-12));
            }
        }
    }

    // per-image pi in shared mode has exactly d entries; specific has p*d
    CHECK(pi.size() / 2 == cfg.width);
    auto model_sp = [&] {
        PETLMethodConfig ms = m;
        ms.dvpt_mode = DvptMode::specific;
        return build_method(ms, backbone, cfg, 6, 14);
    }();
    auto pi_sp =
        meta_net_forward(model_sp.params(), pooled, 2, DvptMode::specific, 4, cfg.width);
    CHECK(pi_sp.shape() == Shape{2, 4, cfg.width});
}

TEST_CASE("specific mode: two distinct images produce distinct pi") {
    auto cfg = desk_cfg();
    auto backbone = init_backbone<double>(cfg, 45);
    PETLMethodConfig m;
    m.kind = MethodKind::dvpt;
    m.prompt_count = 3;
    m.metanet_layers = 2;
    m.dvpt_mode = DvptMode::specific;
    auto model = build_method(m, backbone, cfg, 6, 15);
    Rng rng(46);
    for (auto& v : model.params().tensor("metanet.layer1.weight").values())
        v = rng.uniform(-0.5, 0.5);

    auto batch = random_batch(cfg, 2, 47);
    auto pi = meta_net_forward(model.params(), pool_to_grid(batch), 2, DvptMode::specific, 3,
                               cfg.width);
    std::vector<double> pi1(pi.values().begin(), pi.values().begin() + 3 * cfg.width);
    std::vector<double> pi2(pi.values().begin() + 3 * cfg.width, pi.values().end());
    CHECK(max_abs_diff(pi1, pi2) > 0.0);
}

TEST_CASE("dvpt backward reaches both the static prompts and the Meta-Net") {
    auto cfg = ViTConfig::tiny();
    auto backbone = init_backbone<double>(cfg, 48);
    PETLMethodConfig m;
    m.kind = MethodKind::dvpt;
    m.prompt_count = 2;
    m.metanet_layers = 2;
    m.dvpt_mode = DvptMode::shared;
    auto model = build_method(m, backbone, cfg, 4, 16);
    // non-zero final layer so the Meta-Net actually contributes
    Rng rng(49);
    for (auto& v : model.params().tensor("metanet.layer1.weight").values())
        v = rng.uniform(-0.3, 0.3);

    auto batch = random_batch(cfg, 2, 50);
    {
        GraphScope<double> scope;
        auto loss = cross_entropy(model.forward(batch), {0, 1});
        scope.backward(loss);
    }
    auto grad_norm = [](const Tensor<double>& t) {
        if (!t.has_grad()) return 0.0;
        double s = 0.0;
        for (double g : t.grad()) s += g * g;
        return s;
    };
    CHECK(grad_norm(model.params().tensor("prompts")) > 0.0);
    CHECK(grad_norm(model.params().tensor("metanet.layer0.weight")) > 0.0);
    CHECK(grad_norm(model.params().tensor("metanet.layer1.weight")) > 0.0);
    CHECK_FALSE(model.params().tensor("layer0.attn.q.weight").has_grad());
}

TEST_CASE("dvpt finite differences over prompts, Meta-Net and head pass at 1e-4") {
    auto cfg = ViTConfig::tiny();
    auto backbone = init_backbone<double>(cfg, 51);
    PETLMethodConfig m;
    m.kind = MethodKind::dvpt;
    m.prompt_count = 2;
    m.metanet_layers = 2;
    m.dvpt_mode = DvptMode::specific;
    auto model = build_method(m, backbone, cfg, 4, 17);
    Rng rng(52);
    for (auto& v : model.params().tensor("metanet.layer1.weight").values())
        v = rng.uniform(-0.3, 0.3);

    auto batch = random_batch(cfg, 2, 53);
    std::vector<int> labels{1, 3};
    std::vector<GradCheckParam<double>> params;
    for (auto& p : model.params().all()) {
        if (p.trainable) params.push_back({p.name, p.value});
    }
    auto f = [&]() { return cross_entropy(model.forward(batch), labels); };
    auto report = grad_check<double>(f, params, 1e-5, 1e-4, 40);
    CHECK_MESSAGE(report.passed, report.summary());
}

TEST_CASE("adapter with zero-initialized up-projection equals the frozen forward at step 0") {
    auto cfg = desk_cfg();
    auto backbone = init_backbone<double>(cfg, 54);
    PETLMethodConfig lin;
    lin.kind = MethodKind::linear;
    auto linear_model = build_method(lin, backbone, cfg, 7, 18);

    for (std::size_t r : {8, 64}) {
        PETLMethodConfig am;
        am.kind = MethodKind::adapter;
        am.adapter_dim = r;
        auto adapter_model = build_method(am, backbone, cfg, 7, 18);
        auto batch = random_batch(cfg, 2, 55);
        CHECK(bit_equal(adapter_model.forward(batch).values(),
                        linear_model.forward(batch).values()));

        // closed form 2*N*(d*r + r + r*d + d) + head vs mask-sum oracle
        const std::size_t d = cfg.width, N = cfg.num_layers;
        const std::size_t closed = 2 * N * (d * r + r + r * d + d) + (7 * d + 7);
        CHECK(count_trainable(adapter_model).total == closed);
        CHECK(count_trainable(adapter_model).by_group.at("adapters") ==
              2 * N * (d * r + r + r * d + d));
    }
}

TEST_CASE("sidetune limits: alpha -> 1 is linear probing, alpha -> 0 is the side network") {
    auto cfg = desk_cfg();
    auto backbone = init_backbone<double>(cfg, 56);
    PETLMethodConfig lin;
    lin.kind = MethodKind::linear;
    auto linear_model = build_method(lin, backbone, cfg, 5, 19);

    PETLMethodConfig sm;
    sm.kind = MethodKind::sidetune;
    auto side_model = build_method(sm, backbone, cfg, 5, 19);
    auto batch = random_batch(cfg, 2, 57);

    side_model.params().tensor("alpha").values()[0] = 40.0;  // sigmoid -> 1.0 exactly
    CHECK(max_abs_diff(side_model.forward(batch).values(),
                       linear_model.forward(batch).values()) < 1e-12);

    side_model.params().tensor("alpha").values()[0] = -40.0;  // sigmoid -> ~4e-18
    auto logits = side_model.forward(batch);
    // oracle: head(side(pooled)) computed through the same public pieces
    auto pooled = pool_to_grid(batch);
    auto side_feat = linear(relu(linear(pooled, side_model.params().tensor("side.layer0.weight"),
                                        side_model.params().tensor("side.layer0.bias"))),
                            side_model.params().tensor("side.layer1.weight"),
                            side_model.params().tensor("side.layer1.bias"));
    auto expect = linear(side_feat, side_model.params().tensor("head.weight"),
                         side_model.params().tensor("head.bias"));
    CHECK(max_abs_diff(logits.values(), expect.values()) < 1e-12);
}

TEST_CASE("sidetune gradients reach the side network and alpha, not the backbone") {
    auto cfg = ViTConfig::tiny();
    auto backbone = init_backbone<double>(cfg, 58);
    PETLMethodConfig sm;
    sm.kind = MethodKind::sidetune;
    auto model = build_method(sm, backbone, cfg, 4, 20);
    auto batch = random_batch(cfg, 2, 59);
    {
        GraphScope<double> scope;
        auto loss = cross_entropy(model.forward(batch), {0, 2});
        scope.backward(loss);
    }
    CHECK(model.params().tensor("side.layer0.weight").has_grad());
    CHECK(model.params().tensor("alpha").has_grad());
    CHECK_FALSE(model.params().tensor("layer0.attn.q.weight").has_grad());
    CHECK_FALSE(model.params().tensor("patch.weight").has_grad());
}

TEST_CASE("structurally: vpt prompts are input-independent, dvpt prompts are not") {
    auto cfg = ViTConfig::tiny();
    auto backbone = init_backbone<double>(cfg, 60);
    auto batch = random_batch(cfg, 2, 61);

    PETLMethodConfig vm;
    vm.kind = MethodKind::vpt;
    vm.prompt_count = 2;
    auto vpt_model = build_method(vm, backbone, cfg, 4, 21);
    {
        GraphScope<double> scope;
        batch.set_requires_grad(true);  // give the image graph identity
        auto logits = vpt_model.forward(batch);
        CHECK_FALSE(scope.graph().depends_on(vpt_model.last_prompt_tokens(), batch.storage()));
        CHECK(scope.graph().depends_on(logits.storage(), batch.storage()));
        CHECK(scope.graph().depends_on(logits.storage(),
                                       vpt_model.params().tensor("prompts").storage()));
    }
    batch.set_requires_grad(false);

    PETLMethodConfig dm = vm;
    dm.kind = MethodKind::dvpt;
    dm.metanet_layers = 2;
    auto dvpt_model = build_method(dm, backbone, cfg, 4, 21);
    {
        GraphScope<double> scope;
        batch.set_requires_grad(true);
        dvpt_model.forward(batch);
        // pool_to_grid output is constant data, so dependence is traced
        // through the Meta-Net path onto the prompts tensor instead
        CHECK(scope.graph().depends_on(dvpt_model.last_prompt_tokens(),
                                       dvpt_model.params().tensor("prompts").storage()));
        bool metanet_edge = scope.graph().depends_on(
            dvpt_model.last_prompt_tokens(),
            dvpt_model.params().tensor("metanet.layer0.weight").storage());
        CHECK(metanet_edge);
    }
    batch.set_requires_grad(false);
}

TEST_SUITE_END();
