#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "arcp/rng.hpp"
#include "arcp/synth.hpp"

using namespace arcp;

namespace {

double min_pairwise_distance(const Scene& scene) {
    double best = 1e18;
    const auto& a = scene.tracks[0].samples;
    const auto& b = scene.tracks[1].samples;
    for (std::size_t i = 0; i < a.size(); ++i)
        best = std::min(best, std::hypot(a[i].x - b[i].x, a[i].y - b[i].y));
    return best;
}

}  // namespace

TEST_CASE("social forces generator") {
    SFParams params;

    SECTION("single aligned agent walks straight at the desired speed") {
        SFAgentInit init;
        init.x = 0;
        init.y = 0;
        init.goal_x = 100;
        init.goal_y = 0;
        init.vx = params.desired_speed;
        init.vy = 0;
        Scene scene = simulate_social_forces({init}, 15, params);
        const auto& samples = scene.tracks[0].samples;
        for (const auto& s : samples) {
            REQUIRE(std::abs(s.y) < 1e-9);
            REQUIRE(s.v == Catch::Approx(params.desired_speed).margin(1e-9));
        }
        // straight constant-speed track: equal spacing per step
        for (std::size_t i = 1; i < samples.size(); ++i)
            REQUIRE(samples[i].x - samples[i - 1].x ==
                    Catch::Approx(params.desired_speed * params.dt).margin(1e-9));
    }

    SECTION("repulsion increases the head-on minimum separation") {
        // fine timestep so the short-range force is resolved
        auto make_inits = [] {
            std::vector<SFAgentInit> inits(2);
            inits[0] = {-4.0, 0.05, 4.0, 0.05, 1.3, 0.0};
            inits[1] = {4.0, -0.05, -4.0, -0.05, -1.3, 0.0};
            return inits;
        };
        SFParams with = params;
        with.dt = 0.1;
        SFParams without = with;
        without.repulsion_a = 0.0;
        Scene repel = simulate_social_forces(make_inits(), 70, with);
        Scene plain = simulate_social_forces(make_inits(), 70, without);
        REQUIRE(min_pairwise_distance(repel) > min_pairwise_distance(plain));
    }

    SECTION("seed determinism") {
        Scene a = gen_social_forces(5, 20, params, 99);
        Scene b = gen_social_forces(5, 20, params, 99);
        REQUIRE(a.tracks.size() == b.tracks.size());
        for (std::size_t i = 0; i < a.tracks.size(); ++i)
            for (std::size_t j = 0; j < a.tracks[i].samples.size(); ++j) {
                REQUIRE(a.tracks[i].samples[j].x == b.tracks[i].samples[j].x);
                REQUIRE(a.tracks[i].samples[j].qz == b.tracks[i].samples[j].qz);
            }
    }

    SECTION("speeds stay below twice the desired speed") {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            Scene scene = gen_social_forces(6, 25, params, seed);
            for (const auto& track : scene.tracks)
                for (const auto& s : track.samples)
                    REQUIRE(s.v <= 2.0 * params.desired_speed + 1e-9);
        }
    }

    SECTION("repulsion helps on average over seeded head-on scenes") {
        SFParams fine = params;
        fine.dt = 0.1;
        SFParams without = fine;
        without.repulsion_a = 0.0;
        double mean_with = 0, mean_without = 0;
        const int scenes = 100;
        Rng rng(5150);
        for (int i = 0; i < scenes; ++i) {
            const double off = rng.uniform(0.02, 0.3);
            std::vector<SFAgentInit> inits(2);
            inits[0] = {-4.0, off, 4.0, off, 1.3, 0.0};
            inits[1] = {4.0, -off, -4.0, -off, -1.3, 0.0};
            mean_with += min_pairwise_distance(simulate_social_forces(inits, 70, fine));
            mean_without += min_pairwise_distance(simulate_social_forces(inits, 70, without));
        }
        REQUIRE(mean_with / scenes > mean_without / scenes);
    }
}

TEST_CASE("constant velocity generator") {
    SECTION("unit velocity from origin advances one unit per frame") {
        // dt = 1 and speed 1 for round positions
        Scene scene = gen_constant_velocity(1, 5, 1.0, 1.0, 42, /*dt=*/1.0);
        const auto& ss = scene.tracks[0].samples;
        for (std::size_t i = 1; i < ss.size(); ++i) {
            const double step = std::hypot(ss[i].x - ss[i - 1].x, ss[i].y - ss[i - 1].y);
            REQUIRE(step == Catch::Approx(1.0).margin(1e-12));
        }
    }
    SECTION("v field equals the speed and yaw matches the heading") {
        Scene scene = gen_constant_velocity(6, 10, 0.4, 1.8, 7);
        for (const auto& track : scene.tracks) {
            for (std::size_t i = 1; i < track.samples.size(); ++i) {
                const auto& prev = track.samples[i - 1];
                const auto& cur = track.samples[i];
                const double dt = 0.4;
                const double vx = (cur.x - prev.x) / dt;
                const double vy = (cur.y - prev.y) / dt;
                REQUIRE(cur.v == Catch::Approx(std::hypot(vx, vy)).margin(1e-9));
                const double yaw = 2 * std::atan2(cur.qz, cur.qw);
                REQUIRE(std::abs(std::remainder(yaw - std::atan2(vy, vx), 2 * M_PI)) < 1e-9);
            }
        }
    }
}

TEST_CASE("crossing labeler") {
    WindowSpec spec;
    spec.t_obs = 4;
    spec.t_pred = 6;
    spec.stride = 10;
    spec.n_max = 4;

    CrossingRule rule;
    rule.corridor_x0 = -1;
    rule.corridor_x1 = 1;
    rule.corridor_y0 = -1;
    rule.corridor_y1 = 1;
    rule.horizon = 6.0;

    SECTION("empty scene with a green phase is Cross") {
        Scene scene;
        scene.frame_rate = 1.0;
        CrossingRule green = rule;
        green.phases = {{0, TrafficLightState::Green}};
        auto labels = label_crossing(scene, green, spec);
        REQUIRE(labels.size() == 1);
        REQUIRE(labels[0].label == CrossingLabel::Cross);
    }

    SECTION("agent driving through the corridor inside the horizon blocks crossing") {
        // straight line x(t) = -5 + t, y = 0: enters |x|<=1 at frames 4..6,
        // decision point is frame 4, horizon covers it
        Scene scene;
        scene.frame_rate = 1.0;
        AgentTrack t;
        t.agent_id = 0;
        for (int f = 0; f < 10; ++f) {
            AgentSample s;
            s.frame = f;
            s.x = -5.0 + f;
            s.y = 0.0;
            s.v = 1.0;
            t.samples.push_back(s);
        }
        scene.tracks.push_back(t);
        auto labels = label_crossing(scene, rule, spec);
        REQUIRE(labels.size() == 1);
        REQUIRE(labels[0].label == CrossingLabel::DontCross);
    }

    SECTION("agent moving away from the corridor keeps it Cross") {
        Scene scene;
        scene.frame_rate = 1.0;
        AgentTrack t;
        t.agent_id = 0;
        for (int f = 0; f < 10; ++f) {
            AgentSample s;
            s.frame = f;
            s.x = 3.0 + f;  // starts outside, moves further away
            s.y = 2.0;
            s.v = 1.0;
            t.samples.push_back(s);
        }
        scene.tracks.push_back(t);
        auto labels = label_crossing(scene, rule, spec);
        REQUIRE(labels.size() == 1);
        REQUIRE(labels[0].label == CrossingLabel::Cross);
    }

    SECTION("red phase anywhere in the window blocks crossing") {
        Scene scene;
        scene.frame_rate = 1.0;
        AgentTrack t;
        t.agent_id = 0;
        for (int f = 0; f < 10; ++f) {
            AgentSample s;
            s.frame = f;
            s.x = 30.0;
            s.y = 30.0;
            t.samples.push_back(s);
        }
        scene.tracks.push_back(t);
        CrossingRule red = rule;
        red.phases = {{0, TrafficLightState::Green}, {8, TrafficLightState::Red}};
        auto labels = label_crossing(scene, red, spec);
        REQUIRE(labels.size() == 1);
        REQUIRE(labels[0].label == CrossingLabel::DontCross);
        REQUIRE(labels[0].signal_at_decision == TrafficLightState::Green);
    }

    SECTION("labels match a brute-force point-in-rectangle recount") {
        Rng rng(31);
        SFParams params;
        for (int trial = 0; trial < 30; ++trial) {
            Scene scene = gen_social_forces(4, 20, params, 1000 + trial);
            CrossingRule r = rule;
            if (trial % 2 == 0) r.phases = {{0, TrafficLightState::Green}};
            auto labels = label_crossing(scene, r, spec);
            auto labels2 = label_crossing(scene, r, spec);
            const auto wins = window_scene(scene, spec);
            REQUIRE(labels.size() == wins.size());
            const std::int64_t horizon_frames =
                static_cast<std::int64_t>(std::llround(r.horizon * scene.frame_rate));
            for (std::size_t w = 0; w < wins.size(); ++w) {
                REQUIRE(labels[w].label == labels2[w].label);  // pure function
                bool blocked = false;
                const std::int64_t decision = wins[w].start_frame + spec.t_obs;
                for (const auto& track : scene.tracks)
                    for (const auto& s : track.samples)
                        if (s.frame >= decision && s.frame <= decision + horizon_frames &&
                            s.x >= r.corridor_x0 && s.x <= r.corridor_x1 && s.y >= r.corridor_y0 &&
                            s.y <= r.corridor_y1)
                            blocked = true;
                bool signal_ok = true;
                if (!r.phases.empty())
                    for (std::int64_t f = wins[w].start_frame; f < wins[w].start_frame + spec.total(); ++f)
                        if (r.state_at(f) != TrafficLightState::Green) signal_ok = false;
                const CrossingLabel want =
                    (!blocked && signal_ok) ? CrossingLabel::Cross : CrossingLabel::DontCross;
                REQUIRE(labels[w].label == want);
            }
        }
    }
}

TEST_CASE("signal patch renderer") {
    SECTION("off state renders no disc") {
        Tensor img = render_signal_patch(TrafficLightState::Off, 24, 0.1, 5);
        for (std::int64_t i = 0; i < img.size(); ++i) {
            REQUIRE(img[i] >= 0.4 - 1e-12);
            REQUIRE(img[i] <= 0.6 + 1e-12);
        }
    }
    SECTION("red disc pushes the red channel above green") {
        Tensor img = render_signal_patch(TrafficLightState::Red, 32, 0.1, 5);
        double r = 0, g = 0;
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) {
                r += img.at(0, y, x);
                g += img.at(1, y, x);
            }
        REQUIRE(r > g);
    }
    SECTION("different seeds move the disc") {
        Tensor a = render_signal_patch(TrafficLightState::Green, 32, 0.0, 1);
        Tensor b = render_signal_patch(TrafficLightState::Green, 32, 0.0, 2);
        bool differs = false;
        for (std::int64_t i = 0; i < a.size() && !differs; ++i) differs = a[i] != b[i];
        REQUIRE(differs);
    }
    SECTION("size below 16 rejected") {
        REQUIRE_THROWS_AS(render_signal_patch(TrafficLightState::Red, 8, 0.1, 1), std::invalid_argument);
    }
}
