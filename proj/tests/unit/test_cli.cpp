#include <doctest.h>

#include <fstream>
#include <sstream>
#include <thread>

#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>

#include "sketchdiff/cli.hpp"
#include "sketchdiff/trainer.hpp"
#include "../support/gradcheck.hpp"
#include "../support/synthetic.hpp"
#include "../support/tempdir.hpp"

// After Eigen: <resolv.h> defines an _res macro.
#include <httplib.h>

extern char** environ;

using namespace sketchdiff;
using namespace sketchdiff::testing;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out, err;
};

Run run(std::vector<std::string> args) {
    args.insert(args.begin(), "sketchdiff");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli_dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

ModelSpec tiny_spec() {
    ModelSpec s;
    s.network = grad_micro_config();
    s.T = 6;
    s.beta_start = 1e-3;
    s.beta_end = 0.2;
    s.height = s.width = 8;
    return s;
}

fs::path tiny_checkpoint(const fs::path& dir) {
    const UNet net(tiny_spec().network);
    const fs::path p = dir / "tiny.ckpt";
    save_checkpoint(init_train_state(net, 1), tiny_spec(), p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_SUITE("cli usage") {
    TEST_CASE("missing required flag is a usage error") {
        TempDir dir;
        const Run r = run({"sample", "--out", (dir / "o.png").string()});
        CHECK(r.code == 2);
        CHECK(r.err.find("--ckpt") != std::string::npos);
        CHECK(r.err.find("Usage") != std::string::npos);
        CHECK(r.out.empty());
    }

    TEST_CASE("unknown flags and subcommands are usage errors") {
        CHECK(run({"sample", "--bogus"}).code == 2);
        CHECK(run({"frobnicate"}).code == 2);
        CHECK(run({}).code == 2);
        const Run r = run({"extract-conditions", "--in", "/", "--out", "/tmp", "--colour", "red"});
        CHECK(r.code == 2);
        CHECK(r.err.find("Usage") != std::string::npos);
    }

    TEST_CASE("out-of-range values are usage errors") {
        TempDir dir;
        const fs::path ck = tiny_checkpoint(dir.path());
        CHECK(run({"sample", "--ckpt", ck.string(), "--out", "x.png", "--s-sketch", "-1"}).code == 2);
        CHECK(run({"sample", "--ckpt", ck.string(), "--out", "x.png", "--realism", "1.5"}).code == 2);
        CHECK(run({"train", "--config", ck.string(), "--stage", "3"}).code == 2);
    }

    TEST_CASE("help exits cleanly") {
        const Run r = run({"--help"});
        CHECK(r.code == 0);
        CHECK(r.out.find("extract-conditions") != std::string::npos);
    }

    TEST_CASE("runtime failures exit 1") {
        TempDir dir;
        std::ofstream(dir / "junk.ckpt") << "nonsense";
        const Run r = run({"sample", "--ckpt", (dir / "junk.ckpt").string(), "--out", (dir / "o.png").string()});
        CHECK(r.code == 1);
        CHECK(r.err.rfind("error: ", 0) == 0);
    }
}

TEST_SUITE("cli commands") {
    TEST_CASE("extract-conditions writes a sketch and a stroke per image") {
        TempDir dir;
        fs::create_directories(dir / "in");
        for (int i = 0; i < 3; ++i)
            write_png(dir / "in" / ("img" + std::to_string(i) + ".png"), model_to_raster(synthetic_image(i)));
        std::ofstream(dir / "in" / "notes.txt") << "ignored";
        const Run r = run({"extract-conditions", "--in", (dir / "in").string(), "--out", (dir / "out").string()});
        REQUIRE(r.code == 0);
        int files = 0;
        for (const auto& e : fs::directory_iterator(dir / "out")) {
            (void)e;
            ++files;
        }
        CHECK(files == 6);
        for (int i = 0; i < 3; ++i) {
            const std::string stem = "img" + std::to_string(i);
            const Raster8 sk = read_png(dir / "out" / (stem + "_sketch.png"), 1);
            const ImageBuffer expect = extract_sketch(raster_to_model(model_to_raster(synthetic_image(i))));
            CHECK(binarize_sketch(sk) == expect);
            CHECK(fs::exists(dir / "out" / (stem + "_stroke.png")));
        }
        CHECK(run({"extract-conditions", "--in", (dir / "in").string(), "--out", (dir / "o2").string(), "--low",
                   "0.3", "--high", "0.2"})
                  .code == 1);
    }

    TEST_CASE("sample with a fixed seed is reproducible") {
        TempDir dir;
        const fs::path ck = tiny_checkpoint(dir.path());
        Raster8 sketch{8, 8, 1, std::vector<std::uint8_t>(64, 255)};
        sketch.pixels[10] = 0;
        write_png(dir / "sk.png", sketch);
        write_png(dir / "st.png", model_to_raster(random_image(8, 8, 3, 2)));
        auto sample = [&](const std::string& name, const std::string& seed) {
            return run({"sample", "--ckpt", ck.string(), "--sketch", (dir / "sk.png").string(), "--stroke",
                        (dir / "st.png").string(), "--s-sketch", "2", "--s-stroke", "1.5", "--realism", "0.3",
                        "--seed", seed, "--out", (dir / name).string()});
        };
        REQUIRE(sample("a.png", "7").code == 0);
        REQUIRE(sample("b.png", "7").code == 0);
        REQUIRE(sample("c.png", "8").code == 0);
        CHECK(slurp(dir / "a.png") == slurp(dir / "b.png"));
        CHECK(slurp(dir / "a.png") != slurp(dir / "c.png"));
        const Raster8 img = read_png(dir / "a.png", 3);
        CHECK(img.height == 8);
        CHECK(img.width == 8);

        // Wrong-size conditions fail at run time, naming the expected size.
        write_png(dir / "big.png", Raster8{16, 16, 1, std::vector<std::uint8_t>(256, 255)});
        const Run bad = run({"sample", "--ckpt", ck.string(), "--sketch", (dir / "big.png").string(), "--out",
                             (dir / "d.png").string()});
        CHECK(bad.code == 1);
        CHECK(bad.err.find("8x8") != std::string::npos);
    }

    TEST_CASE("train stage 1 then stage 2, then evaluate") {
        TempDir dir;
        write_synthetic_corpus(dir / "data", 4, 8);
        const nlohmann::json cfg = {{"manifest", "data/manifest.jsonl"},
                                    {"output_dir", "run"},
                                    {"steps", 4},
                                    {"batch_size", 2},
                                    {"learning_rate", 1e-3},
                                    {"checkpoint_every", 2},
                                    {"seed", 5},
                                    {"model", tiny_spec().to_json()}};
        std::ofstream(dir / "train.json") << cfg.dump();
        const Run s1 = run({"train", "--config", (dir / "train.json").string(), "--stage", "1"});
        INFO(s1.err);
        REQUIRE(s1.code == 0);
        CHECK(fs::exists(dir / "run" / "stage1_final.ckpt"));
        CHECK(fs::exists(dir / "run" / "stage1_step2.ckpt"));
        CHECK(fs::exists(dir / "run" / "latest.ckpt"));

        // Stage 2 from scratch is rejected; resuming from stage 1 works.
        CHECK(run({"train", "--config", (dir / "train.json").string(), "--stage", "2"}).code == 1);
        const Run s2 = run({"train", "--config", (dir / "train.json").string(), "--stage", "2", "--resume",
                            (dir / "run" / "stage1_final.ckpt").string()});
        REQUIRE(s2.code == 0);
        const TrainState st = load_checkpoint(dir / "run" / "stage2_final.ckpt");
        CHECK(st.step == 8);
        CHECK(st.stage == 2);

        std::ifstream log(dir / "run" / "progress.jsonl");
        int lines = 0;
        for (std::string line; std::getline(log, line); ++lines) CHECK(nlohmann::json::parse(line).contains("loss"));
        CHECK(lines == 8);

        const Run ev = run({"evaluate", "--ckpt", (dir / "run" / "stage2_final.ckpt").string(), "--real",
                            (dir / "data").string(), "--n", "4", "--out", (dir / "eval.json").string()});
        REQUIRE(ev.code == 0);
        std::ifstream ej(dir / "eval.json");
        const nlohmann::json e = nlohmann::json::parse(ej);
        CHECK(e["n_real"] == 4);
        CHECK(e["n_fake"] == 4);
        CHECK(e["fid"].get<double>() >= 0.0);
        CHECK(e["perceptual"].get<double>() > 0.0);
    }
}

#ifdef SKETCHDIFF_TOOL
TEST_SUITE("cli binary") {
    TEST_CASE("exit code and usage from the installed tool") {
        const std::string cmd = std::string(SKETCHDIFF_TOOL) + " sample 2>/dev/null >/dev/null";
        const int status = std::system(cmd.c_str());
        REQUIRE(WIFEXITED(status));
        CHECK(WEXITSTATUS(status) == 2);
    }

    TEST_CASE("serve honours VISIOBLEND_PORT and stops on SIGTERM") {
        int port = 0;
        {
            httplib::Server probe;
            port = probe.bind_to_any_port("127.0.0.1");
        }
        REQUIRE(port > 0);
        const std::string env_port = "VISIOBLEND_PORT=" + std::to_string(port);
        std::vector<char*> env;
        for (char** e = environ; *e; ++e)
            if (std::string(*e).rfind("VISIOBLEND_PORT=", 0) != 0) env.push_back(*e);
        env.push_back(const_cast<char*>(env_port.c_str()));
        env.push_back(nullptr);
        const char* argv[] = {SKETCHDIFF_TOOL, "serve", "--port", "1", nullptr};
        pid_t pid = 0;
        REQUIRE(posix_spawn(&pid, SKETCHDIFF_TOOL, nullptr, nullptr, const_cast<char* const*>(argv), env.data()) == 0);
        {
            httplib::Client c("127.0.0.1", port);
            c.set_keep_alive(false);
            httplib::Result r;
            for (int i = 0; i < 200 && !r; ++i) {
                std::this_thread::sleep_for(std::chrono::milliseconds(25));
                r = c.Get("/api/v1/models");
            }
            REQUIRE(r);
            CHECK(r->status == 200);
            CHECK(nlohmann::json::parse(r->body)["loaded"] == false);
        }
        kill(pid, SIGTERM);
        int status = 0;
        waitpid(pid, &status, 0);
        REQUIRE(WIFEXITED(status));
        CHECK(WEXITSTATUS(status) == 0);
    }
}
#endif
