#include <doctest.h>

#include <cmath>

#include "gbdm/nets.hpp"
#include "test_util.hpp"

using namespace gbdm;

namespace {

Tensor random_history(const SystemSpec& spec, int64_t B, uint64_t seed) {
    Rng rng(seed, "hist");
    Shape s = {B, spec.history + 1};
    for (int64_t d : spec.state_shape) s.push_back(d);
    return rng.normal_tensor(s);
}

// de-zeros the output layers so Jacobian / sharing tests see a live network
void randomize_param(ParamStore& store, const std::string& name, uint64_t seed) {
    Rng rng(seed, "rand");
    for (size_t i = 0; i < store.size(); ++i)
        if (store.names[i] == name)
            store.tensors[i] = rng.normal_tensor(store.tensors[i].shape);
}

double sum_val(const Var& v) {
    double acc = 0.0;
    for (float x : v.val().data) acc += x;
    return acc;
}

}  // namespace

TEST_CASE("encoder output dimensions match the configured posterior") {
    SystemSpec spec = system_spec(SystemId::rlc);
    NetConfig cfg = NetConfig::defaults_for(spec);
    Model m = build_model(spec, cfg, 0);
    Tensor hist = random_history(spec, 3, 1);

    Tape tape;
    Binding b = bind(tape, m.store);
    Rng rng(0, "latent");
    auto r = m.encode(tape, b, hist, rng);
    CHECK(r.z.shape() == Shape{3, cfg.h_z});
    CHECK(r.theta.shape() == Shape{3, 2});  // RLC exposes [L, C]
    CHECK(r.mu_z.shape() == Shape{3, cfg.h_z});
    CHECK(r.sigma_theta.shape() == Shape{3, 2});
}

TEST_CASE("encoding is deterministic for a fixed seed") {
    SystemSpec spec = system_spec(SystemId::pendulum);
    Model m = build_model(spec, NetConfig::defaults_for(spec), 4);
    Tensor hist = random_history(spec, 2, 9);

    auto run = [&]() {
        Tape tape;
        Binding b = bind(tape, m.store);
        Rng rng(123, "latent");
        auto r = m.encode(tape, b, hist, rng);
        std::vector<float> out = r.z.val().data;
        out.insert(out.end(), r.theta.val().data.begin(), r.theta.val().data.end());
        return out;
    };
    CHECK(run() == run());
}

TEST_CASE("posterior sigmas are strictly positive on random inputs") {
    for (SystemId id : {SystemId::rlc, SystemId::lorenz, SystemId::bimodal_toy}) {
        SystemSpec spec = system_spec(id);
        Model m = build_model(spec, NetConfig::defaults_for(spec), 11);
        for (uint64_t s = 0; s < 5; ++s) {
            Tape tape;
            Binding b = bind(tape, m.store);
            Rng rng(s, "latent");
            auto r = m.encode(tape, b, random_history(spec, 2, s), rng);
            for (float v : r.sigma_z.val().data) CHECK(v >= kSigmaFloor);
            if (r.has_theta)
                for (float v : r.sigma_theta.val().data) CHECK(v >= kSigmaFloor);
        }
    }
}

TEST_CASE("encoder rejects a wrong history length") {
    SystemSpec spec = system_spec(SystemId::rlc);
    Model m = build_model(spec, NetConfig::defaults_for(spec), 0);
    Tensor bad({1, spec.history, spec.state_dim()});  // one frame short
    Tape tape;
    Binding b = bind(tape, m.store);
    Rng rng(0, "latent");
    CHECK_THROWS_AS(m.encode(tape, b, bad, rng), GbdmError);
}

TEST_CASE("encoder weight gradient of sampled theta matches finite differences") {
    SystemSpec spec = system_spec(SystemId::rlc);
    Model m = build_model(spec, NetConfig::defaults_for(spec), 7);
    Tensor hist = random_history(spec, 2, 3);
    Rng noise(5, "latent");
    Tensor eps_z = noise.normal_tensor({2, m.cfg.h_z});
    Tensor eps_th = noise.normal_tensor({2, spec.theta_dim()});

    auto loss_at = [&]() {
        Tape tape;
        Binding b = bind(tape, m.store);
        auto r = m.encode_with_eps(tape, b, hist, eps_z, eps_th);
        return sum_val(r.theta);
    };

    Tape tape;
    Binding b = bind(tape, m.store);
    auto r = m.encode_with_eps(tape, b, hist, eps_z, eps_th);
    tape.backward(sum(r.theta));

    // probe a handful of entries across every parameter tensor
    for (size_t p = 0; p < m.store.size(); ++p) {
        int64_t n = m.store.tensors[p].size();
        for (int64_t i : {int64_t{0}, n / 2, n - 1}) {
            float orig = m.store.tensors[p][i];
            const double h = 5e-3;
            m.store.tensors[p][i] = static_cast<float>(orig + h);
            double fp = loss_at();
            m.store.tensors[p][i] = static_cast<float>(orig - h);
            double fm = loss_at();
            m.store.tensors[p][i] = orig;
            double fd = (fp - fm) / (2.0 * h);
            double ad = b[p].grad()[i];
            CHECK_MESSAGE(gbdm::testing::grad_close(ad, fd, 1e-3),
                          m.store.names[p], "[", i, "] ad=", ad, " fd=", fd);
        }
    }
}

TEST_CASE("fresh first-order field outputs exactly zero") {
    SystemSpec spec = system_spec(SystemId::lorenz);
    Model m = build_model(spec, NetConfig::defaults_for(spec), 2);
    Tape tape;
    Binding b = bind(tape, m.store);
    Rng rng(0, "x");
    Var x = tape.leaf(rng.normal_tensor({4, 3}));
    Var t = tape.leaf(rng.uniform_tensor({4, 1}, 0.0, 1.0));
    Var th = tape.leaf(rng.normal_tensor({4, 2}));
    Var z = tape.leaf(rng.normal_tensor({4, m.cfg.h_z}));
    Var v = m.velocity(b, x, t, th, z);
    CHECK(v.shape() == Shape{4, 3});
    for (float u : v.val().data) CHECK(u == 0.0f);
}

TEST_CASE("grid field output shape matches the grid state") {
    SystemSpec spec = system_spec(SystemId::reaction_diffusion);
    Model m = build_model(spec, NetConfig::defaults_for(spec), 2);
    Tape tape;
    Binding b = bind(tape, m.store);
    Rng rng(0, "x");
    Var x = tape.leaf(rng.normal_tensor({2, 2, kRdGrid, kRdGrid}));
    Var t = tape.leaf(rng.uniform_tensor({2, 1}, 0.0, 1.0));
    Var th = tape.leaf(rng.normal_tensor({2, 1}));
    Var z = tape.leaf(rng.normal_tensor({2, m.cfg.h_z}));
    Var v = m.velocity(b, x, t, th, z);
    CHECK(v.shape() == Shape{2, 2, kRdGrid, kRdGrid});
    for (float u : v.val().data) CHECK(u == 0.0f);  // zero-initialized output conv
}

TEST_CASE("field jacobian w.r.t. x matches finite differences") {
    SystemSpec spec = system_spec(SystemId::lorenz);
    Model m = build_model(spec, NetConfig::defaults_for(spec), 3);
    randomize_param(m.store, "field.out.W", 21);

    Rng rng(1, "x");
    std::vector<float> x0 = {0.3f, -0.8f, 1.1f};
    Tensor tval = Tensor({1, 1}, {0.4f});
    Tensor th = rng.normal_tensor({1, 2});
    Tensor zz = rng.normal_tensor({1, m.cfg.h_z});

    auto f = [&](const std::vector<float>& xv) {
        Tape tape;
        Binding b = bind(tape, m.store);
        Var x = tape.leaf(Tensor({1, 3}, xv));
        Var v = m.velocity(b, x, tape.leaf(tval), tape.leaf(th), tape.leaf(zz));
        return sum_val(v);
    };
    auto fd = gbdm::testing::numeric_grad(f, x0);

    Tape tape;
    Binding b = bind(tape, m.store);
    Var x = tape.leaf(Tensor({1, 3}, x0));
    tape.backward(sum(m.velocity(b, x, tape.leaf(tval), tape.leaf(th), tape.leaf(zz))));
    for (int64_t i = 0; i < 3; ++i)
        CHECK_MESSAGE(gbdm::testing::grad_close(x.grad()[i], fd[static_cast<size_t>(i)], 1e-3),
                      "component ", i);
}

TEST_CASE("fresh second-order field outputs (0, 0)") {
    SystemSpec spec = system_spec(SystemId::pendulum);
    Model m = build_model(spec, NetConfig::defaults_for(spec), 6);
    Tape tape;
    Binding b = bind(tape, m.store);
    Rng rng(0, "x");
    Var x = tape.leaf(rng.normal_tensor({3, 1}));
    Var xd = tape.leaf(rng.normal_tensor({3, 1}));
    Var t = tape.leaf(rng.uniform_tensor({3, 1}, 0.0, 1.0));
    Var th = tape.leaf(rng.normal_tensor({3, 1}));
    Var z = tape.leaf(rng.normal_tensor({3, m.cfg.h_z}));
    auto [v, a] = m.velocity_accel(b, x, xd, t, th, z);
    for (float u : v.val().data) CHECK(u == 0.0f);
    for (float u : a.val().data) CHECK(u == 0.0f);
}

TEST_CASE("second-order heads share the backbone") {
    SystemSpec spec = system_spec(SystemId::pendulum);
    Model m = build_model(spec, NetConfig::defaults_for(spec), 6);
    randomize_param(m.store, "field.v_out.W", 31);
    randomize_param(m.store, "field.a_out.W", 32);

    Rng rng(0, "x");
    Tensor x = rng.normal_tensor({1, 1}), xd = rng.normal_tensor({1, 1});
    Tensor tv = Tensor({1, 1}, {0.5f}), th = rng.normal_tensor({1, 1});
    Tensor zz = rng.normal_tensor({1, m.cfg.h_z});
    auto eval = [&]() {
        Tape tape;
        Binding b = bind(tape, m.store);
        auto [v, a] = m.velocity_accel(b, tape.leaf(x), tape.leaf(xd), tape.leaf(tv),
                                       tape.leaf(th), tape.leaf(zz));
        return std::pair<float, float>{v.val()[0], a.val()[0]};
    };
    auto [v0, a0] = eval();
    // perturb one backbone weight; both heads must move
    for (size_t p = 0; p < m.store.size(); ++p)
        if (m.store.names[p] == "field.bb0.W") m.store.tensors[p][0] += 0.5f;
    auto [v1, a1] = eval();
    CHECK(v1 != v0);
    CHECK(a1 != a0);
}

TEST_CASE("acceleration gradient w.r.t. xdot matches finite differences") {
    SystemSpec spec = system_spec(SystemId::pendulum);
    Model m = build_model(spec, NetConfig::defaults_for(spec), 8);
    randomize_param(m.store, "field.a_out.W", 41);

    Rng rng(2, "x");
    Tensor x = rng.normal_tensor({1, 1});
    Tensor tv = Tensor({1, 1}, {0.3f}), th = rng.normal_tensor({1, 1});
    Tensor zz = rng.normal_tensor({1, m.cfg.h_z});
    auto f = [&](const std::vector<float>& xdv) {
        Tape tape;
        Binding b = bind(tape, m.store);
        auto [v, a] = m.velocity_accel(b, tape.leaf(x), tape.leaf(Tensor({1, 1}, xdv)),
                                       tape.leaf(tv), tape.leaf(th), tape.leaf(zz));
        (void)v;
        return sum_val(a);
    };
    std::vector<float> xd0 = {0.7f};
    auto fd = gbdm::testing::numeric_grad(f, xd0);

    Tape tape;
    Binding b = bind(tape, m.store);
    Var xd = tape.leaf(Tensor({1, 1}, xd0));
    auto [v, a] = m.velocity_accel(b, tape.leaf(x), xd, tape.leaf(tv), tape.leaf(th),
                                   tape.leaf(zz));
    (void)v;
    tape.backward(sum(a));
    CHECK(gbdm::testing::grad_close(xd.grad()[0], fd[0], 1e-3));
}

TEST_CASE("theta posterior depends on the sampled z (structured factorization)") {
    SystemSpec spec = system_spec(SystemId::rlc);
    Model m = build_model(spec, NetConfig::defaults_for(spec), 13);
    Tensor hist = random_history(spec, 1, 2);
    Rng noise(3, "latent");
    Tensor eps_th = noise.normal_tensor({1, spec.theta_dim()});
    Tensor eps_a = noise.normal_tensor({1, m.cfg.h_z});
    Tensor eps_b = eps_a;
    eps_b[0] += 1.0f;  // different z draw, same history

    auto mu_theta_at = [&](const Tensor& eps_z) {
        Tape tape;
        Binding b = bind(tape, m.store);
        auto r = m.encode_with_eps(tape, b, hist, eps_z, eps_th);
        return r.mu_theta.val().data;
    };
    CHECK(mu_theta_at(eps_a) != mu_theta_at(eps_b));
}

TEST_CASE("encoder is sensitive to the order of the history") {
    SystemSpec spec = system_spec(SystemId::lorenz);
    Model m = build_model(spec, NetConfig::defaults_for(spec), 17);
    Tensor hist = random_history(spec, 1, 5);
    Tensor rev = hist;
    int64_t T = spec.history + 1, d = spec.state_dim();
    for (int64_t k = 0; k < T; ++k)
        for (int64_t j = 0; j < d; ++j) rev[k * d + j] = hist[(T - 1 - k) * d + j];

    auto mu_z_at = [&](const Tensor& h) {
        Tape tape;
        Binding b = bind(tape, m.store);
        Rng rng(0, "latent");
        return m.encode(tape, b, h, rng).mu_z.val().data;
    };
    CHECK(mu_z_at(hist) != mu_z_at(rev));
}

TEST_CASE("latents disabled collapses sampling to the posterior means") {
    SystemSpec spec = system_spec(SystemId::rlc);
    NetConfig cfg = NetConfig::defaults_for(spec);
    cfg.latents_enabled = false;
    Model m = build_model(spec, cfg, 19);
    Tensor hist = random_history(spec, 2, 1);
    Tape tape;
    Binding b = bind(tape, m.store);
    Rng rng(0, "latent");
    auto r = m.encode(tape, b, hist, rng);
    CHECK(r.z.val().data == r.mu_z.val().data);
    CHECK(r.theta.val().data == r.mu_theta.val().data);
}
