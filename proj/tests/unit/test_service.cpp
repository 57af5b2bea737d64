#include <doctest.h>

#include <fstream>
#include <mutex>
#include <set>
#include <thread>

#include "sketchdiff/service.hpp"
#include "../support/stubs.hpp"
#include "../support/tempdir.hpp"

// After Eigen: <resolv.h> defines an _res macro.
#include <httplib.h>

using namespace sketchdiff;
using namespace sketchdiff::testing;
using nlohmann::json;

namespace {

ModelSpec stub_spec(int size = 16, int T = 10) {
    ModelSpec s;
    s.T = T;
    s.beta_start = 1e-3;
    s.beta_end = 0.2;
    s.height = size;
    s.width = size;
    return s;
}

/// Records which condition combinations each network call carried.
class RecordingDenoiser final : public Denoiser {
public:
    ImageBuffer predict(const ImageBuffer& x7, int) const override {
        const Presence p = presence(x7);
        std::lock_guard lock(mu_);
        seen_.insert({p.sketch, p.stroke});
        return ImageBuffer(x7.height(), x7.width(), 3, 0.1f);
    }
    std::set<std::pair<bool, bool>> take() const {
        std::lock_guard lock(mu_);
        auto out = seen_;
        seen_.clear();
        return out;
    }

private:
    mutable std::mutex mu_;
    mutable std::set<std::pair<bool, bool>> seen_;
};

class SlowDenoiser final : public Denoiser {
public:
    ImageBuffer predict(const ImageBuffer& x7, int) const override {
        std::this_thread::sleep_for(std::chrono::milliseconds(3));
        return ImageBuffer(x7.height(), x7.width(), 3, 0.0f);
    }
};

std::string sketch_b64(int size) {
    Raster8 r{size, size, 1, std::vector<std::uint8_t>(static_cast<std::size_t>(size) * size, 255)};
    for (int x = 2; x < size - 2; ++x) r.pixels[static_cast<std::size_t>(size / 2) * size + x] = 0;
    return base64_encode(encode_png(r));
}

std::string stroke_b64(int size) {
    Raster8 r{size, size, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(size) * size * 3, 128)};
    for (int y = 3; y < 7; ++y)
        for (int x = 3; x < 7; ++x) {
            auto* p = &r.pixels[(static_cast<std::size_t>(y) * size + x) * 3];
            p[0] = 255;
            p[1] = 0;
            p[2] = 0;
        }
    return base64_encode(encode_png(r));
}

struct Server {
    InferenceService svc;
    int port;
    std::thread thread;
    httplib::Client client;

    explicit Server(std::shared_ptr<const LoadedModel> model, ServiceOptions opts = {})
        : svc(std::move(model), std::move(opts)), port(svc.bind("127.0.0.1", 0)),
          thread([this] { svc.listen(); }), client("127.0.0.1", port) {
        client.set_read_timeout(30, 0);
        client.set_tcp_nodelay(true);
    }
    ~Server() {
        svc.stop();
        thread.join();
    }

    httplib::Result post(const json& body) { return client.Post("/api/v1/generate", body.dump(), "application/json"); }

    std::string submit(const json& body) {
        auto r = post(body);
        REQUIRE(r);
        REQUIRE(r->status == 202);
        return json::parse(r->body).at("job_id").get<std::string>();
    }

    json poll(const std::string& id) {
        auto r = client.Get("/api/v1/jobs/" + id);
        REQUIRE(r);
        REQUIRE(r->status == 200);
        return json::parse(r->body);
    }

    json finish(const std::string& id) {
        for (int i = 0; i < 20000; ++i) {
            json rec = poll(id);
            if (rec["status"] == "done" || rec["status"] == "failed") return rec;
            std::this_thread::sleep_for(std::chrono::milliseconds(1));
        }
        FAIL("job did not finish");
        return {};
    }
};

Raster8 decode_result(const json& rec, int channels = 3) {
    const auto bytes = base64_decode(rec.at("result_png").get<std::string>());
    return decode_png(bytes, channels);
}

}  // namespace

TEST_SUITE("base64") {
    TEST_CASE("standard test vectors") {
        auto enc = [](std::string s) {
            return base64_encode(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
        };
        CHECK(enc("") == "");
        CHECK(enc("f") == "Zg==");
        CHECK(enc("fo") == "Zm8=");
        CHECK(enc("foo") == "Zm9v");
        CHECK(enc("foobar") == "Zm9vYmFy");
        const auto d = base64_decode("Zm9vYg==");
        CHECK(std::string(d.begin(), d.end()) == "foob");
        const auto p = base64_decode("data:image/png;base64,Zm8=");
        CHECK(std::string(p.begin(), p.end()) == "fo");
    }

    TEST_CASE("round trip of arbitrary bytes and rejection of junk") {
        Rng rng(1);
        for (int n = 0; n < 40; ++n) {
            std::vector<std::uint8_t> b(static_cast<std::size_t>(n));
            for (auto& v : b) v = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
            CHECK(base64_decode(base64_encode(b)) == b);
        }
        CHECK_THROWS_AS(base64_decode("abc"), std::invalid_argument);
        CHECK_THROWS_AS(base64_decode("ab!d"), std::invalid_argument);
    }
}

TEST_SUITE("request validation") {
    TEST_CASE("defaults and json round trip") {
        const GenerateRequest r = GenerateRequest::from_json(json::object());
        CHECK_FALSE(r.sketch_png);
        CHECK(r.s_sketch == 1.0);
        CHECK(r.s_stroke == 1.0);
        CHECK(r.realism == 0.0);
        CHECK_FALSE(r.seed);
        GenerateRequest q;
        q.sketch_png = "abc=";
        q.s_sketch = 2.5;
        q.seed = 9;
        q.steps = 4;
        const GenerateRequest back = GenerateRequest::from_json(q.to_json());
        CHECK(back.sketch_png == q.sketch_png);
        CHECK(back.s_sketch == 2.5);
        CHECK(back.seed == 9u);
        CHECK(back.steps == 4);
    }

    TEST_CASE("field errors name the field") {
        auto field_of = [](const json& j) -> std::string {
            try {
                prepare_job(GenerateRequest::from_json(j), stub_spec());
            } catch (const RequestError& e) {
                return e.field();
            }
            return "<none>";
        };
        CHECK(field_of({{"s_sketch", -1}}) == "s_sketch");
        CHECK(field_of({{"s_stroke", -0.5}}) == "s_stroke");
        CHECK(field_of({{"s_sketch", "big"}}) == "s_sketch");
        CHECK(field_of({{"realism", 1.5}}) == "realism");
        CHECK(field_of({{"realism", 0.5}}) == "realism");  // nothing to refine toward
        CHECK(field_of({{"seed", -3}}) == "seed");
        CHECK(field_of({{"seed", 1.5}}) == "seed");
        CHECK(field_of({{"steps", 0}}) == "steps");
        CHECK(field_of({{"steps", 11}}) == "steps");
        CHECK(field_of({{"sketch_png", 5}}) == "sketch_png");
        CHECK(field_of({{"sketch_png", "!!!!"}}) == "sketch_png");
        CHECK(field_of({{"stroke_png", sketch_b64(8)}}) == "stroke_png");
        CHECK(field_of({{"sketch_png", sketch_b64(16)}}) == "<none>");
    }

    TEST_CASE("decoding maps display values and binarizes sketches") {
        GenerateRequest r;
        r.sketch_png = sketch_b64(16);
        r.stroke_png = stroke_b64(16);
        r.seed = 4;
        const GenerationJob job = prepare_job(r, stub_spec());
        REQUIRE(job.cond.sketch);
        REQUIRE(job.cond.stroke);
        CHECK(job.cond.sketch->at(8, 5, 0) == -1.0f);
        CHECK(job.cond.sketch->at(0, 0, 0) == 1.0f);
        CHECK(job.cond.stroke->at(4, 4, 0) == 1.0f);
        CHECK(job.cond.stroke->at(4, 4, 1) == -1.0f);
        CHECK(job.cond.stroke->at(0, 0, 0) == to_model(128));
        CHECK(job.seed == 4u);
        CHECK(job.steps == 0);
    }

    TEST_CASE("realism without a reference uses the stroke image") {
        GenerateRequest r;
        r.stroke_png = stroke_b64(16);
        r.realism = 0.5;
        const GenerationJob job = prepare_job(r, stub_spec());
        REQUIRE(job.settings.reference);
        CHECK(*job.settings.reference == *job.cond.stroke);
        CHECK(job.settings.realism_stop > 0.0);
    }
}

TEST_SUITE("http service") {
    TEST_CASE("four conditioning regimes reach the denoiser as requested") {
        auto rec = std::make_shared<RecordingDenoiser>();
        Server s(LoadedModel::from_denoiser(stub_spec(), rec));
        using Seen = std::set<std::pair<bool, bool>>;
        struct Case {
            json body;
            Seen expect;
        };
        const std::vector<Case> cases = {
            {{{"sketch_png", sketch_b64(16)}, {"stroke_png", stroke_b64(16)}, {"s_sketch", 2}, {"s_stroke", 2}},
             Seen{{false, false}, {true, false}, {true, true}}},
            {{{"sketch_png", sketch_b64(16)}, {"s_sketch", 2}, {"s_stroke", 2}}, Seen{{false, false}, {true, false}}},
            {{{"stroke_png", stroke_b64(16)}, {"s_sketch", 2}, {"s_stroke", 2}}, Seen{{false, false}, {false, true}}},
            {{{"s_sketch", 2}, {"s_stroke", 2}}, Seen{{false, false}}},
        };
        for (const auto& c : cases) {
            INFO(c.body.dump().substr(0, 60));
            rec->take();
            const json done = s.finish(s.submit(c.body));
            REQUIRE(done["status"] == "done");
            CHECK(rec->take() == c.expect);
            const Raster8 img = decode_result(done);
            CHECK(img.height == 16);
            CHECK(img.width == 16);
            CHECK(done["progress"] == 1.0);
            CHECK(done["error"].is_null());
            CHECK(done["finished_at"].is_number());
        }
    }

    TEST_CASE("fixed seed gives byte-identical results; different seeds differ") {
        Server s(LoadedModel::from_denoiser(stub_spec(), std::make_shared<WavyDenoiser>()));
        const json body = {{"sketch_png", sketch_b64(16)}, {"stroke_png", stroke_b64(16)}, {"seed", 7}};
        const json a = s.finish(s.submit(body));
        const json b = s.finish(s.submit(body));
        CHECK(a["result_png"] == b["result_png"]);
        json other = body;
        other["seed"] = 8;
        CHECK(s.finish(s.submit(other))["result_png"] != a["result_png"]);
    }

    TEST_CASE("steps override runs a shortened schedule") {
        auto rec = std::make_shared<BranchConstantDenoiser>(0.0f, 0.0f, 0.0f);
        Server s(LoadedModel::from_denoiser(stub_spec(), rec));
        s.finish(s.submit({{"steps", 4}, {"seed", 3}}));
        CHECK(rec->calls.load() == 4);
    }

    TEST_CASE("validation errors are 400 with the field") {
        Server s(LoadedModel::from_denoiser(stub_spec(), std::make_shared<ZeroDenoiser>()));
        auto r = s.post({{"s_sketch", -1}});
        REQUIRE(r);
        CHECK(r->status == 400);
        json e = json::parse(r->body);
        CHECK(e["error"] == "s_sketch must be ≥ 0");
        CHECK(e["field"] == "s_sketch");

        r = s.post({{"sketch_png", sketch_b64(8)}});
        CHECK(r->status == 400);
        e = json::parse(r->body);
        CHECK(e["field"] == "sketch_png");
        CHECK(e["error"].get<std::string>().find("16x16") != std::string::npos);

        r = s.client.Post("/api/v1/generate", "{not json", "application/json");
        CHECK(r->status == 400);
        CHECK(json::parse(r->body)["field"].is_null());

        r = s.client.Post("/api/v1/generate", "[1, 2]", "application/json");
        CHECK(r->status == 400);

        const std::string big = json{{"sketch_png", std::string(9 * 1024 * 1024, 'A')}}.dump();
        r = s.client.Post("/api/v1/generate", big, "application/json");
        REQUIRE(r);
        CHECK(r->status == 400);
        CHECK(s.svc.jobs()->size() == 0);
    }

    TEST_CASE("unknown job is 404") {
        Server s(LoadedModel::from_denoiser(stub_spec(), std::make_shared<ZeroDenoiser>()));
        auto r = s.client.Get("/api/v1/jobs/00000000-0000-4000-8000-000000000000");
        REQUIRE(r);
        CHECK(r->status == 404);
        CHECK(r->get_header_value("Access-Control-Allow-Origin") == "*");
    }

    TEST_CASE("no model loaded is 503") {
        Server s(nullptr);
        auto r = s.post({{"seed", 1}});
        REQUIRE(r);
        CHECK(r->status == 503);
        auto m = s.client.Get("/api/v1/models");
        CHECK(m->status == 200);
        CHECK(json::parse(m->body)["loaded"] == false);
    }

    TEST_CASE("model description and CORS preflight") {
        Server s(LoadedModel::from_denoiser(stub_spec(), std::make_shared<ZeroDenoiser>()));
        auto m = s.client.Get("/api/v1/models");
        REQUIRE(m);
        const json j = json::parse(m->body);
        CHECK(j["loaded"] == true);
        CHECK(j["height"] == 16);
        CHECK(j["width"] == 16);
        CHECK(j["steps"] == 10);
        CHECK(m->get_header_value("Access-Control-Allow-Origin") == "*");
        auto o = s.client.Options("/api/v1/generate");
        REQUIRE(o);
        CHECK(o->status == 204);
        CHECK(o->get_header_value("Access-Control-Allow-Methods").find("POST") != std::string::npos);
        CHECK(o->get_header_value("Access-Control-Allow-Headers").find("Content-Type") != std::string::npos);
    }

    TEST_CASE("static files are served at the root") {
        TempDir dir;
        std::ofstream(dir / "index.html") << "<html>canvas</html>";
        ServiceOptions opts;
        opts.ui_dir = dir.path();
        Server s(LoadedModel::from_denoiser(stub_spec(), std::make_shared<ZeroDenoiser>()), opts);
        auto r = s.client.Get("/");
        REQUIRE(r);
        CHECK(r->status == 200);
        CHECK(r->body == "<html>canvas</html>");
    }

    TEST_CASE("progress and status only move forward") {
        Server s(LoadedModel::from_denoiser(stub_spec(16, 40), std::make_shared<SlowDenoiser>()));
        const std::string first = s.submit({{"seed", 1}});
        const std::string id = s.submit({{"seed", 2}});  // queued behind the first
        const std::map<std::string, int> rank = {{"queued", 0}, {"running", 1}, {"done", 2}, {"failed", 2}};
        double last_progress = -1.0;
        int last_rank = -1;
        std::set<std::string> statuses;
        bool saw_partial = false;
        for (int i = 0; i < 20000; ++i) {
            const json rec = s.poll(id);
            const std::string st = rec["status"];
            statuses.insert(st);
            const double p = rec["progress"];
            CHECK(p >= last_progress);
            CHECK(p >= 0.0);
            CHECK(p <= 1.0);
            CHECK(rank.at(st) >= last_rank);
            saw_partial |= p > 0.0 && p < 1.0;
            last_progress = p;
            last_rank = rank.at(st);
            if (st == "done") break;
            std::this_thread::sleep_for(std::chrono::milliseconds(1));
        }
        CHECK(statuses.count("queued") == 1);
        CHECK(statuses.count("running") == 1);
        CHECK(statuses.count("done") == 1);
        CHECK(saw_partial);
        CHECK(s.poll(first)["status"] == "done");
    }

    TEST_CASE("concurrent jobs match serial runs") {
        auto model = LoadedModel::from_denoiser(stub_spec(), std::make_shared<WavyDenoiser>());
        ServiceOptions opts;
        opts.jobs.workers = 3;
        Server s(model, opts);
        std::vector<json> bodies;
        for (int i = 0; i < 6; ++i)
            bodies.push_back({{"sketch_png", sketch_b64(16)}, {"stroke_png", stroke_b64(16)}, {"seed", 100 + i},
                              {"s_sketch", 1.5}, {"realism", i % 2 ? 0.5 : 0.0}});
        std::vector<std::string> ids(bodies.size());
        std::vector<std::thread> clients;
        for (std::size_t i = 0; i < bodies.size(); ++i)
            clients.emplace_back([&, i] {
                httplib::Client c("127.0.0.1", s.port);
                auto r = c.Post("/api/v1/generate", bodies[i].dump(), "application/json");
                if (r && r->status == 202) ids[i] = json::parse(r->body)["job_id"];
            });
        for (auto& c : clients) c.join();
        for (std::size_t i = 0; i < bodies.size(); ++i) {
            REQUIRE_FALSE(ids[i].empty());
            const json done = s.finish(ids[i]);
            REQUIRE(done["status"] == "done");
            const ImageBuffer serial = generate(*model, prepare_job(GenerateRequest::from_json(bodies[i]), model->spec));
            CHECK(decode_result(done).pixels == model_to_raster(serial).pixels);
        }
    }

    TEST_CASE("job store stays bounded over a 1000-job soak") {
        ServiceOptions opts;
        opts.jobs.max_finished = 50;
        Server s(LoadedModel::from_denoiser(stub_spec(8, 2), std::make_shared<ZeroDenoiser>()), opts);
        s.client.set_keep_alive(true);
        std::string last;
        std::size_t peak = 0;
        for (int i = 0; i < 1000; ++i) {
            last = s.submit({{"seed", i}});
            peak = std::max(peak, s.svc.jobs()->size());
        }
        CHECK(s.finish(last)["status"] == "done");
        CHECK(s.svc.jobs()->size() <= 50);
        MESSAGE("peak records " << peak);
        CHECK(peak <= 1024 + 50);
    }
}

TEST_SUITE("job store") {
    TEST_CASE("finished jobs expire after the retention window") {
        JobStoreOptions o;
        o.retention = std::chrono::seconds(1);
        JobStore store(LoadedModel::from_denoiser(stub_spec(8, 2), std::make_shared<ZeroDenoiser>()), o);
        const std::string a = store.submit(prepare_job(GenerateRequest{}, stub_spec(8, 2)));
        REQUIRE(store.wait(a, std::chrono::seconds(10))->status == JobStatus::done);
        CHECK(store.get(a));
        std::this_thread::sleep_for(std::chrono::milliseconds(1200));
        const std::string b = store.submit(prepare_job(GenerateRequest{}, stub_spec(8, 2)));
        store.wait(b, std::chrono::seconds(10));
        CHECK_FALSE(store.get(a));
        CHECK(store.get(b));
    }

    TEST_CASE("default retention keeps results for at least ten minutes") {
        CHECK(JobStoreOptions{}.retention >= std::chrono::minutes(10));
    }

    TEST_CASE("queue limit") {
        JobStoreOptions o;
        o.max_queued = 2;
        JobStore store(LoadedModel::from_denoiser(stub_spec(16, 200), std::make_shared<SlowDenoiser>()), o);
        int accepted = 0;
        bool full = false;
        for (int i = 0; i < 5; ++i) {
            try {
                store.submit(prepare_job(GenerateRequest{}, stub_spec(16, 200)));
                ++accepted;
            } catch (const QueueFull&) {
                full = true;
            }
        }
        CHECK(full);
        CHECK(accepted <= 3);
    }

    TEST_CASE("failed jobs carry the error") {
        class Throwing final : public Denoiser {
        public:
            ImageBuffer predict(const ImageBuffer&, int) const override { throw std::runtime_error("boom"); }
        };
        JobStore store(LoadedModel::from_denoiser(stub_spec(8, 2), std::make_shared<Throwing>()));
        const std::string id = store.submit(prepare_job(GenerateRequest{}, stub_spec(8, 2)));
        const auto rec = store.wait(id, std::chrono::seconds(10));
        REQUIRE(rec);
        CHECK(rec->status == JobStatus::failed);
        CHECK(rec->error->find("boom") != std::string::npos);
        CHECK_FALSE(rec->result_png);
        const json j = rec->to_json();
        CHECK(j["status"] == "failed");
        CHECK(j["result_png"].is_null());
    }

    TEST_CASE("job ids are unique uuids") {
        JobStore store(LoadedModel::from_denoiser(stub_spec(8, 1), std::make_shared<ZeroDenoiser>()));
        std::set<std::string> ids;
        for (int i = 0; i < 50; ++i) {
            const std::string id = store.submit(prepare_job(GenerateRequest{}, stub_spec(8, 1)));
            CHECK(id.size() == 36);
            CHECK(id[14] == '4');
            ids.insert(id);
        }
        CHECK(ids.size() == 50);
    }
}
