#include <catch2/catch.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "dapose/trainer.hpp"

using namespace dapose;
namespace fs = std::filesystem;
using D = double;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("dapose_trainer_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

cfg::RunConfig tiny_config(uint64_t seed) {
    cfg::RunConfig rc;
    rc.seed = seed;
    rc.dataset.n_source = 12;
    rc.dataset.n_target_train = 12;
    rc.dataset.n_target_eval = 8;
    rc.dataset.image_size = 32;
    rc.dataset.k = 3;
    rc.style.pretrain_steps = 4;
    rc.style.batch = 2;
    rc.trainer.total_iterations = 6;
    rc.trainer.pretrain_steps = 4;
    rc.trainer.batch_source = 4;
    rc.trainer.batch_target = 4;
    rc.trainer.eval_every = 3;
    rc.trainer.checkpoint_every = 3;
    rc.validate();
    return rc;
}

struct TinyWorld {
    cfg::RunConfig rc;
    ToyDatasets data;
    StyleNet<D> style;
    PoseNetwork<D> pose;
};

TinyWorld make_world(uint64_t seed) {
    cfg::RunConfig rc = tiny_config(seed);
    ToyDomainConfig dc = rc.dataset;
    dc.seed = seed;
    ToyDatasets data = generate_toy_domains(dc);
    RngStream boot(mix_seed(seed, 0xabc));
    StyleNet<D> style(boot);
    RngStream boot2(mix_seed(seed, 0xdef));
    PoseNetwork<D> pose(rc.dataset.k, boot2);
    return {rc, std::move(data), std::move(style), std::move(pose)};
}

std::vector<const Sample*> first_ptrs(const std::vector<Sample>& v, int64_t n) {
    std::vector<const Sample*> out;
    for (int64_t i = 0; i < n; ++i) out.push_back(&v[static_cast<size_t>(i)]);
    return out;
}

bool same_breakdown(const LossBreakdown& a, const LossBreakdown& b) {
    return a.l_sup == b.l_sup && a.l_img == b.l_img && a.l_fea == b.l_fea &&
           a.l_pose == b.l_pose && a.l_enth == b.l_enth && a.l_entw == b.l_entw &&
           a.l_div == b.l_div && a.total == b.total &&
           a.masked_keypoint_fraction == b.masked_keypoint_fraction;
}

std::vector<double> param_values(const nn::ParamSet<D>& ps) {
    std::vector<double> out;
    for (const auto& [name, var] : ps.items) {
        const auto& t = var.val();
        out.insert(out.end(), t.data(), t.data() + t.numel());
    }
    return out;
}

} // namespace

// ---------------------------------------------------------------------------
// Learning-rate schedule.
// ---------------------------------------------------------------------------

TEST_CASE("schedule reproduces staircase decay at reference scale") {
    cfg::TrainerConfig tc;
    tc.total_iterations = 30000;
    tc.base_lr = 1e-4;
    tc.milestone_fractions = {0.75, 1.0};
    tc.milestone_lrs = {1e-5, 1e-6};
    const auto s = train::make_schedule(tc);
    CHECK(train::lr_at(s, 0) == 1e-4);
    CHECK(train::lr_at(s, 22499) == 1e-4);
    CHECK(train::lr_at(s, 22500) == 1e-5);
    CHECK(train::lr_at(s, 29999) == 1e-5);
    CHECK(train::lr_at(s, 30000) == 1e-6);
}

TEST_CASE("schedule lr is non-increasing and piecewise constant") {
    cfg::TrainerConfig tc;
    tc.total_iterations = 1000;
    tc.base_lr = 3e-3;
    tc.milestone_fractions = {0.2, 0.5, 0.9};
    tc.milestone_lrs = {1.5e-3, 3e-4, 6e-6};
    const auto s = train::make_schedule(tc);
    double prev = train::lr_at(s, 0);
    int changes = 0;
    for (int64_t it = 1; it <= 1000; ++it) {
        const double lr = train::lr_at(s, it);
        CHECK(lr <= prev);
        if (lr != prev) ++changes;
        prev = lr;
    }
    CHECK(changes == 3);
}

TEST_CASE("schedule invariants reject bad milestone series") {
    train::Schedule s;
    s.base_lr = 1e-4;
    s.total_iterations = 100;
    s.milestones = {{50, 1e-5}, {50, 1e-6}};
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s.milestones = {{40, 1e-5}, {80, 1e-5}}; // not strictly decreasing
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s.milestones = {{40, 2e-4}}; // above base
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s.milestones = {{40, 1e-5}, {80, 1e-6}};
    CHECK_NOTHROW(s.validate());
}

// ---------------------------------------------------------------------------
// EMA teacher update.
// ---------------------------------------------------------------------------

TEST_CASE("ema endpoints are exact") {
    RngStream r1(7), r2(9);
    PoseNetwork<D> teacher(2, r1), student(2, r2);
    const auto before = param_values(teacher.params());
    const auto student_vals = param_values(student.params());

    train::ema_update(teacher.params(), student.params(), 1.0);
    CHECK(param_values(teacher.params()) == before); // mu=1: unchanged

    train::ema_update(teacher.params(), student.params(), 0.0);
    CHECK(param_values(teacher.params()) == student_vals); // mu=0: copied
}

TEST_CASE("ema single step matches elementwise arithmetic") {
    RngStream r1(11), r2(13);
    PoseNetwork<D> teacher(2, r1), student(2, r2);
    const double mu = 0.999;
    const auto t0 = param_values(teacher.params());
    const auto sv = param_values(student.params());
    train::ema_update(teacher.params(), student.params(), mu);
    const auto t1 = param_values(teacher.params());
    REQUIRE(t1.size() == t0.size());
    for (size_t i = 0; i < t1.size(); ++i) CHECK(t1[i] == mu * t0[i] + (1.0 - mu) * sv[i]);
}

TEST_CASE("ema replay over many perturbed steps tracks a scalar oracle") {
    RngStream r1(17), r2(19), noise(23);
    PoseNetwork<D> teacher(2, r1), student(2, r2);
    const double mu = 0.9;
    std::vector<double> oracle = param_values(teacher.params());
    for (int step = 0; step < 25; ++step) {
        // Perturb the student like an optimizer would.
        auto sp = student.params();
        for (auto& [name, var] : sp.items) {
            auto& t = var.node()->value;
            for (int64_t i = 0; i < t.numel(); ++i)
                t[i] += 0.01 * noise.normal();
        }
        const auto sv = param_values(student.params());
        for (size_t i = 0; i < oracle.size(); ++i) oracle[i] = mu * oracle[i] + (1 - mu) * sv[i];
        train::ema_update(teacher.params(), student.params(), mu);
    }
    const auto tv = param_values(teacher.params());
    for (size_t i = 0; i < tv.size(); ++i) CHECK(tv[i] == Approx(oracle[i]).margin(1e-6));
}

TEST_CASE("ema rejects mismatched structures and bad mu") {
    RngStream r1(29), r2(31);
    PoseNetwork<D> a(2, r1), b(3, r2);
    CHECK_THROWS_AS(train::ema_update(a.params(), b.params(), 0.5), std::invalid_argument);
    PoseNetwork<D> c(2, r2);
    CHECK_THROWS_AS(train::ema_update(a.params(), c.params(), 1.5), std::invalid_argument);
    CHECK_THROWS_AS(train::ema_update(a.params(), c.params(), -0.1), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Pretraining and state initialization.
// ---------------------------------------------------------------------------

TEST_CASE("pretrain_source rejects non-positive step counts") {
    auto w = make_world(41);
    CHECK_THROWS_AS(train::pretrain_source<D>(w.data.source, w.rc, 0, 41), ConfigError);
    CHECK_THROWS_AS(train::pretrain_source<D>(w.data.source, w.rc, -3, 41), ConfigError);
}

TEST_CASE("pretrain_source is deterministic and reports a sane summary") {
    auto w = make_world(43);
    const auto a = train::pretrain_source<D>(w.data.source, w.rc, 4, 43);
    const auto b = train::pretrain_source<D>(w.data.source, w.rc, 4, 43);
    CHECK(a.final_loss == b.final_loss);
    CHECK(param_values(a.net.params()) == param_values(b.net.params()));
    CHECK(std::isfinite(a.final_loss));
    CHECK(a.val_pck >= 0.0);
    CHECK(a.val_pck <= 1.0);
}

TEST_CASE("student and teacher share parameters at adaptation step zero") {
    auto w = make_world(47);
    const auto st = train::init_state(w.rc, w.pose, w.style);
    CHECK(param_values(st.student.params()) == param_values(st.teacher.params()));
    CHECK(param_values(st.student.params()) == param_values(w.pose.params()));
    CHECK(st.iteration == 0);
}

// ---------------------------------------------------------------------------
// train_step semantics.
// ---------------------------------------------------------------------------

TEST_CASE("train_step is deterministic given equal states") {
    auto w = make_world(53);
    auto st1 = train::init_state(w.rc, w.pose, w.style);
    auto st2 = train::init_state(w.rc, w.pose, w.style);
    const auto src = first_ptrs(w.data.source, 4);
    const auto tgt = first_ptrs(w.data.target_train, 4);
    const LossWeights weights{1.0, 0.1, 0.3};
    for (int i = 0; i < 3; ++i) {
        const auto b1 = train::train_step(st1, src, tgt, weights, w.rc);
        const auto b2 = train::train_step(st2, src, tgt, weights, w.rc);
        CAPTURE(i);
        CHECK(same_breakdown(b1, b2));
    }
    CHECK(param_values(st1.teacher.params()) == param_values(st2.teacher.params()));
}

TEST_CASE("train_step advances the iteration counter by one") {
    auto w = make_world(59);
    auto st = train::init_state(w.rc, w.pose, w.style);
    const auto src = first_ptrs(w.data.source, 4);
    const auto tgt = first_ptrs(w.data.target_train, 4);
    train::train_step(st, src, tgt, {1.0, 0.1, 0.3}, w.rc);
    CHECK(st.iteration == 1);
    train::train_step(st, src, tgt, {1.0, 0.1, 0.3}, w.rc);
    CHECK(st.iteration == 2);
}

TEST_CASE("zero loss weights still report every unweighted term") {
    auto w = make_world(61);
    auto st = train::init_state(w.rc, w.pose, w.style);
    const auto src = first_ptrs(w.data.source, 4);
    const auto tgt = first_ptrs(w.data.target_train, 4);
    const auto b = train::train_step(st, src, tgt, {0.0, 0.0, 0.0}, w.rc);
    CHECK(b.total == b.l_sup);
    CHECK(b.l_img != 0.0);
    CHECK(b.l_fea != 0.0);
    CHECK(b.l_pose != 0.0);
    CHECK(std::isfinite(b.l_enth));
    CHECK(std::isfinite(b.l_entw));
    CHECK(std::isfinite(b.l_div));
}

TEST_CASE("teacher moves only through the ema rule") {
    auto w = make_world(67);
    w.rc.trainer.ema_mu = 1.0; // freeze the teacher entirely
    auto st = train::init_state(w.rc, w.pose, w.style);
    const auto teacher_before = param_values(st.teacher.params());
    const auto student_before = param_values(st.student.params());
    const auto src = first_ptrs(w.data.source, 4);
    const auto tgt = first_ptrs(w.data.target_train, 4);
    train::train_step(st, src, tgt, {1.0, 0.1, 0.3}, w.rc);
    CHECK(param_values(st.teacher.params()) == teacher_before);
    CHECK(param_values(st.student.params()) != student_before); // optimizer did act
}

TEST_CASE("non-finite totals abort with a breakdown snapshot") {
    auto w = make_world(71);
    auto st = train::init_state(w.rc, w.pose, w.style);
    auto sp = st.student.params();
    // Poison the heatmap head's bias; an early-layer NaN would be absorbed by
    // the pooling/ReLU comparisons before reaching any loss.
    sp.items.back().second.node()->value[0] = std::numeric_limits<double>::quiet_NaN();
    const auto src = first_ptrs(w.data.source, 4);
    const auto tgt = first_ptrs(w.data.target_train, 4);
    try {
        train::train_step(st, src, tgt, {1.0, 0.1, 0.3}, w.rc);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("breakdown snapshot") != std::string::npos);
        CHECK(msg.find("l_sup") != std::string::npos);
    }
}

TEST_CASE("masked keypoint fraction mirrors the pose participation rate") {
    auto w = make_world(73);
    auto st = train::init_state(w.rc, w.pose, w.style);
    const auto src = first_ptrs(w.data.source, 4);
    const auto tgt = first_ptrs(w.data.target_train, 4);
    const auto b = train::train_step(st, src, tgt, {1.0, 0.1, 0.3}, w.rc);
    CHECK(b.masked_keypoint_fraction >= 0.0);
    CHECK(b.masked_keypoint_fraction <= 1.0);
}

// ---------------------------------------------------------------------------
// Checkpointing.
// ---------------------------------------------------------------------------

TEST_CASE("checkpoint save-load-save is byte identical") {
    const auto dir = fresh_dir("roundtrip");
    auto w = make_world(79);
    auto st = train::init_state(w.rc, w.pose, w.style);
    const auto src = first_ptrs(w.data.source, 4);
    const auto tgt = first_ptrs(w.data.target_train, 4);
    train::train_step(st, src, tgt, {1.0, 0.1, 0.3}, w.rc);

    const auto p1 = dir / "a.ckpt";
    const auto p2 = dir / "b.ckpt";
    train::save_checkpoint(st, p1, "deadbeef00000000");
    auto st2 = train::load_checkpoint<D>(p1, w.rc);
    train::save_checkpoint(st2, p2, "deadbeef00000000");

    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    REQUIRE(!b1.empty());
    CHECK(b1 == b2);
}

TEST_CASE("corrupted checkpoints fail the checksum with no partial state") {
    const auto dir = fresh_dir("corrupt");
    auto w = make_world(83);
    auto st = train::init_state(w.rc, w.pose, w.style);
    const auto p = dir / "c.ckpt";
    train::save_checkpoint(st, p, "deadbeef00000000");

    std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(200, std::ios::beg);
    char byte = 0;
    f.seekg(200, std::ios::beg);
    f.read(&byte, 1);
    byte = static_cast<char>(byte ^ 0x5a);
    f.seekp(200, std::ios::beg);
    f.write(&byte, 1);
    f.close();

    try {
        train::load_checkpoint<D>(p, w.rc);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("checksum") != std::string::npos);
    }
}

TEST_CASE("format version mismatches refuse to load and show the manifest") {
    const auto dir = fresh_dir("version");
    ckpt::Container c;
    c.manifest = {{"format_version", kFormatVersion + 7}, {"iteration", 0}};
    c.add_u64s("dummy", {1, 2, 3});
    const auto p = dir / "v.ckpt";
    c.save(p);
    try {
        ckpt::Container::load(p);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("format mismatch") != std::string::npos);
        CHECK(msg.find("format_version") != std::string::npos); // manifest echoed back
    }
}

TEST_CASE("resuming from a checkpoint replays the uninterrupted run exactly") {
    const auto dir = fresh_dir("resume");
    auto w = make_world(89);
    const auto src = first_ptrs(w.data.source, 4);
    const auto tgt = first_ptrs(w.data.target_train, 4);
    const LossWeights weights{1.0, 0.1, 0.3};

    auto full = train::init_state(w.rc, w.pose, w.style);
    std::vector<LossBreakdown> full_hist;
    for (int i = 0; i < 6; ++i) full_hist.push_back(train::train_step(full, src, tgt, weights, w.rc));

    auto part = train::init_state(w.rc, w.pose, w.style);
    for (int i = 0; i < 3; ++i) train::train_step(part, src, tgt, weights, w.rc);
    const auto p = dir / "mid.ckpt";
    train::save_checkpoint(part, p, "deadbeef00000000");
    auto resumed = train::load_checkpoint<D>(p, w.rc);
    REQUIRE(resumed.iteration == 3);
    for (int i = 3; i < 6; ++i) {
        const auto b = train::train_step(resumed, src, tgt, weights, w.rc);
        CAPTURE(i);
        CHECK(same_breakdown(b, full_hist[static_cast<size_t>(i)]));
    }
    CHECK(param_values(resumed.teacher.params()) == param_values(full.teacher.params()));
    CHECK(param_values(resumed.student.params()) == param_values(full.student.params()));
}

// ---------------------------------------------------------------------------
// train_adapt loop.
// ---------------------------------------------------------------------------

TEST_CASE("train_adapt runs to the horizon and reports evals and metrics") {
    const auto dir = fresh_dir("adapt");
    auto w = make_world(97);
    auto st = train::init_state(w.rc, w.pose, w.style);
    std::vector<nlohmann::json> lines;
    const auto res = train::train_adapt(st, w.data, {1.0, 0.1, 0.3}, w.rc, dir,
                                        [&](const nlohmann::json& j) { lines.push_back(j); });
    CHECK(st.iteration == w.rc.trainer.total_iterations);
    CHECK(res.history.size() == static_cast<size_t>(w.rc.trainer.total_iterations));
    REQUIRE(lines.size() == res.history.size());
    for (size_t i = 0; i < lines.size(); ++i) {
        CHECK(lines[i].at("iteration").get<int64_t>() == static_cast<int64_t>(i) + 1);
        CHECK(lines[i].contains("lr"));
        CHECK(lines[i].contains("total"));
    }
    // eval_every=3, total=6: evals at iterations 3 and 6.
    REQUIRE(res.evals.size() == 2);
    CHECK(res.evals[0].iteration == 3);
    CHECK(res.evals[1].iteration == 6);
    CHECK(fs::exists(dir / "checkpoint.ckpt"));
    // The teacher is the final model and never lags the student materially.
    CHECK(res.final_teacher.overall >= res.final_student.overall - 0.02);
}

TEST_CASE("train_adapt with precomputed stylization resumes identically") {
    const auto dir = fresh_dir("adapt_cache");
    auto w = make_world(101);
    w.rc.style.precompute_per_epoch = true;
    const LossWeights weights{1.0, 0.1, 0.3};

    auto full = train::init_state(w.rc, w.pose, w.style);
    std::vector<nlohmann::json> full_lines;
    train::train_adapt(full, w.data, weights, w.rc, dir / "full",
                       [&](const nlohmann::json& j) { full_lines.push_back(j); });

    // Simulate an interrupt after the rolling checkpoint at iteration 3 (the
    // iteration-4 callback fires once that file is on disk), then resume it.
    struct Interrupt {};
    auto part = train::init_state(w.rc, w.pose, w.style);
    try {
        train::train_adapt(part, w.data, weights, w.rc, dir / "part",
                           [&](const nlohmann::json& j) {
                               if (j.at("iteration").get<int64_t>() == 4) throw Interrupt{};
                           });
        FAIL("interrupt did not fire");
    } catch (const Interrupt&) {
    }
    auto resumed = train::load_checkpoint<D>(dir / "part" / "checkpoint.ckpt", w.rc);
    REQUIRE(resumed.iteration == 3);
    std::vector<nlohmann::json> tail_lines;
    train::train_adapt(resumed, w.data, weights, w.rc, dir / "part",
                       [&](const nlohmann::json& j) { tail_lines.push_back(j); });

    REQUIRE(full_lines.size() == 6);
    REQUIRE(tail_lines.size() == 3);
    for (size_t i = 0; i < 3; ++i)
        CHECK(full_lines[3 + i].at("total").get<double>() ==
              tail_lines[i].at("total").get<double>());
    CHECK(param_values(resumed.teacher.params()) == param_values(full.teacher.params()));
}
