#pragma once

// HTTP annotation service: live instance-wise adaptation sessions where a
// person answers the pixel queries. Handlers are transport independent and
// return status + JSON; mount() wires them into an httplib server.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "eviatta/cli.hpp"
#include "eviatta/engine.hpp"
#include "eviatta/pgm.hpp"

namespace eviatta {

struct ServiceConfig {
  std::string checkpoint;
  std::size_t max_sessions = 64;
  std::size_t max_generated = 4096;  // cap on corpora generated from a request body
};

struct HttpResponse {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

enum class SessionPhase { annotating, sample_complete, finished };

inline const char* to_string(SessionPhase p) {
  switch (p) {
    case SessionPhase::annotating: return "annotating";
    case SessionPhase::sample_complete: return "sample_complete";
    case SessionPhase::finished: return "finished";
  }
  return "?";
}

struct Session {
  std::string id;
  std::mutex mu;
  std::vector<Sample> corpus;
  std::unique_ptr<AdaptationEngine> engine;
  std::size_t index = 0;  // stream position of the current sample
  SessionPhase phase = SessionPhase::annotating;
};

/// Foreground probability of H×W×C logits (class 1 softmax).
inline RealMap foreground_probability(const Tensor& logits) {
  const std::size_t H = logits.dim(0), W = logits.dim(1), C = logits.dim(2);
  RealMap p(H, W, 0.0);
  for (std::size_t i = 0; i < H * W; ++i) {
    const Real* z = logits.data().data() + i * C;
    Real mx = z[0];
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, z[c]);
    Real s = 0;
    for (std::size_t c = 0; c < C; ++c) s += std::exp(z[c] - mx);
    p.values[i] = std::exp(z[1] - mx) / s;
  }
  return p;
}

inline std::string pgm_base64(const Grid<std::uint8_t>& g) { return base64_encode(encode_pgm(g)); }

class AnnotationService {
 public:
  explicit AnnotationService(ServiceConfig cfg) : cfg_(std::move(cfg)) {}

  std::size_t session_count() const {
    std::lock_guard lock(registry_mu_);
    return sessions_.size();
  }

  /// POST /sessions {corpus, config}. `corpus` is a corpus directory or an
  /// object {n, shift, seed} rendered on the fly; `config` holds run fields
  /// plus an optional seed.
  HttpResponse create_session(const std::string& body) {
    json req;
    try {
      req = json::parse(body);
    } catch (const json::exception& e) {
      return error(400, std::string("malformed JSON: ") + e.what());
    }
    if (!req.is_object() || !req.contains("corpus")) return error(400, "body needs a corpus");

    auto s = std::make_shared<Session>();
    RunConfig cfg = RunConfig::instancewise();
    try {
      const json conf = req.value("config", json::object());
      if (!conf.is_object()) return error(400, "config must be an object");
      cfg = run_from_json(conf, cfg);
      if (conf.contains("seed")) cfg.seed = conf.at("seed").get<std::uint64_t>();
      if (cfg.regime != Regime::instancewise) return error(400, "sessions run the instance-wise regime only");
      cfg.validate();

      const json& c = req.at("corpus");
      if (c.is_string()) {
        const std::string dir = c.get<std::string>();
        if (!std::filesystem::exists(std::filesystem::path(dir) / "manifest.json"))
          return error(400, "corpus not found: " + dir);
        s->corpus = load_corpus(dir);
      } else if (c.is_object()) {
        const std::size_t n = c.value("n", std::size_t{10});
        if (n == 0 || n > cfg_.max_generated) return error(400, "corpus size out of range");
        s->corpus = generate_corpus(n, SceneFamily{}, ShiftSpec::preset(c.value("shift", std::string("moderate"))),
                                    c.value("seed", std::uint64_t{0}));
      } else {
        return error(400, "corpus must be a path or a generator object");
      }
      if (s->corpus.empty()) return error(400, "corpus is empty");
    } catch (const std::exception& e) {
      return error(400, e.what());
    }

    if (cfg_.checkpoint.empty() || !std::filesystem::exists(cfg_.checkpoint))
      return error(503, "checkpoint unavailable");
    try {
      s->engine = std::make_unique<AdaptationEngine>(PromptableModel::deserialize(read_file(cfg_.checkpoint)), cfg);
    } catch (const std::exception& e) {
      return error(503, std::string("checkpoint unusable: ") + e.what());
    }
    if (s->engine->model().config().image_size != s->corpus.front().image.rows)
      return error(400, "corpus image size does not match the checkpoint");

    s->engine->begin_batch(std::span<const Sample>(s->corpus).subspan(0, 1));
    s->phase = SessionPhase::annotating;
    {
      std::lock_guard lock(registry_mu_);
      if (sessions_.size() >= cfg_.max_sessions) return error(503, "session limit reached");
      s->id = new_id();
      sessions_[s->id] = s;
    }
    return {201, json{{"session_id", s->id}, {"samples", s->corpus.size()}, {"M", cfg.points}}.dump()};
  }

  /// GET /sessions/{id}/query
  HttpResponse query(const std::string& id) {
    auto s = find(id);
    if (!s) return error(404, "unknown session");
    std::lock_guard lock(s->mu);
    if (s->phase == SessionPhase::finished) return error(409, "stream finished");
    if (s->phase == SessionPhase::sample_complete || s->engine->cursor(0).complete())
      return error(409, "sample complete; POST /sessions/{id}/advance");
    AnnotationCursor& cur = s->engine->cursor(0);
    const PixelQuery& q = cur.pending();
    const Sample& smp = s->corpus[s->index];
    json out = query_json(*s, q);
    out["image"] = pgm_base64(quantize(smp.image));
    out["mask"] = pgm_base64(quantize(foreground_probability(cur.current_logits())));
    out["heatmap"] = pgm_base64(quantize_normalized(cur.current_maps().data));
    return {200, out.dump()};
  }

  /// POST /sessions/{id}/annotate {label: 0|1}
  HttpResponse annotate(const std::string& id, const std::string& body) {
    auto s = find(id);
    if (!s) return error(404, "unknown session");
    int label = -1;
    try {
      const json req = json::parse(body);
      if (!req.is_object() || !req.contains("label") || !req.at("label").is_number_integer())
        return error(400, "label must be 0 or 1");
      label = req.at("label").get<int>();
    } catch (const json::exception&) {
      return error(400, "malformed JSON");
    }
    if (label != 0 && label != 1) return error(400, "label must be 0 or 1");

    std::lock_guard lock(s->mu);
    if (s->phase != SessionPhase::annotating) return error(409, "no pending query");
    AnnotationCursor& cur = s->engine->cursor(0);
    if (cur.complete()) return error(409, "no pending query");
    cur.pending();
    cur.answer(label);
    json out{{"sample_index", s->index}, {"m", cur.answered()}, {"M", cur.budget()}};
    out["mask"] = pgm_base64(quantize(foreground_probability(cur.current_logits())));
    if (cur.complete()) {
      complete_sample(*s, out);
    } else {
      out["sample_complete"] = false;
      out["next_query"] = query_json(*s, cur.pending());
    }
    out["metrics"] = running_metrics(*s);
    return {200, out.dump()};
  }

  /// POST /sessions/{id}/advance: loads the next sample once the current
  /// one is complete. A sample with a zero point budget completes here.
  HttpResponse advance(const std::string& id) {
    auto s = find(id);
    if (!s) return error(404, "unknown session");
    std::lock_guard lock(s->mu);
    if (s->phase == SessionPhase::finished) return error(409, "stream finished");
    json out = json::object();
    if (s->phase == SessionPhase::annotating) {
      if (!s->engine->cursor(0).complete()) return error(409, "current sample still has pending queries");
      complete_sample(*s, out);
    }
    ++s->index;
    if (s->index >= s->corpus.size()) {
      s->phase = SessionPhase::finished;
      out["finished"] = true;
    } else {
      s->engine->begin_batch(std::span<const Sample>(s->corpus).subspan(s->index, 1));
      s->phase = SessionPhase::annotating;
      out["finished"] = false;
      out["sample_index"] = s->index;
    }
    out["metrics"] = running_metrics(*s);
    return {200, out.dump()};
  }

  /// GET /sessions/{id}
  HttpResponse status(const std::string& id) {
    auto s = find(id);
    if (!s) return error(404, "unknown session");
    std::lock_guard lock(s->mu);
    json out{{"session_id", s->id},
             {"phase", to_string(s->phase)},
             {"sample_index", s->index},
             {"samples", s->corpus.size()},
             {"config", run_to_json(s->engine->config())},
             {"metrics", running_metrics(*s)}};
    return {200, out.dump()};
  }

  /// GET /sessions/{id}/log: the metric log as CSV.
  HttpResponse log_csv(const std::string& id) {
    auto s = find(id);
    if (!s) return error(404, "unknown session");
    std::lock_guard lock(s->mu);
    return {200, s->engine->log().to_csv(), "text/csv"};
  }

  void mount(httplib::Server& server) {
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                {"Access-Control-Allow-Headers", "Content-Type"}});
    server.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    auto reply = [](httplib::Response& res, const HttpResponse& r) {
      res.status = r.status;
      res.set_content(r.body, r.content_type);
    };
    server.Post("/sessions", [this, reply](const httplib::Request& req, httplib::Response& res) {
      reply(res, create_session(req.body));
    });
    server.Get(R"(/sessions/([A-Za-z0-9]+)/query)", [this, reply](const httplib::Request& req, httplib::Response& res) {
      reply(res, query(req.matches[1]));
    });
    server.Post(R"(/sessions/([A-Za-z0-9]+)/annotate)",
                [this, reply](const httplib::Request& req, httplib::Response& res) {
                  reply(res, annotate(req.matches[1], req.body));
                });
    server.Post(R"(/sessions/([A-Za-z0-9]+)/advance)",
                [this, reply](const httplib::Request& req, httplib::Response& res) {
                  reply(res, advance(req.matches[1]));
                });
    server.Get(R"(/sessions/([A-Za-z0-9]+)/log)", [this, reply](const httplib::Request& req, httplib::Response& res) {
      reply(res, log_csv(req.matches[1]));
    });
    server.Get(R"(/sessions/([A-Za-z0-9]+))", [this, reply](const httplib::Request& req, httplib::Response& res) {
      reply(res, status(req.matches[1]));
    });
  }

 private:
  static HttpResponse error(int status, const std::string& msg) { return {status, json{{"error", msg}}.dump()}; }

  std::shared_ptr<Session> find(const std::string& id) {
    std::lock_guard lock(registry_mu_);
    auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second;
  }

  std::string new_id() {
    static thread_local std::random_device rd;
    const std::uint64_t v = mix_seed((std::uint64_t{rd()} << 32) ^ rd(), counter_++);
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
  }

  static json query_json(Session& s, const PixelQuery& q) {
    const AnnotationCursor& cur = s.engine->cursor(0);
    return {{"sample_index", s.index}, {"sample_id", cur.sample_id()}, {"row", q.row},
            {"col", q.col},           {"m", cur.answered()},          {"M", cur.budget()}};
  }

  static void complete_sample(Session& s, json& out) {
    const BatchRecord& rec = s.engine->finish_batch();
    s.phase = SessionPhase::sample_complete;
    out["sample_complete"] = true;
    out["batch"] = {{"batch_index", rec.batch_index}, {"dice", rec.metrics.dice}, {"jaccard", rec.metrics.jaccard},
                    {"asd", rec.metrics.asd},         {"hd95", rec.metrics.hd95}, {"loss", rec.loss},
                    {"stepped", rec.stepped}};
  }

  static json running_metrics(const Session& s) {
    const MetricLog& log = s.engine->log();
    const MetricReport a = log.aggregate();
    return {{"samples_scored", log.per_sample.size()},
            {"dice", a.dice},
            {"jaccard", a.jaccard},
            {"asd", a.asd},
            {"hd95", a.hd95}};
  }

  ServiceConfig cfg_;
  mutable std::mutex registry_mu_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::atomic<std::uint64_t> counter_{0};
};

}  // namespace eviatta
