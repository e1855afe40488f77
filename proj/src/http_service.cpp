#include "lprobe/http_service.hpp"

#include <fstream>
#include <sstream>

#include <httplib.h>
#include <json.hpp>

namespace lprobe {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<ServedImage> load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read manifest " + path.string());
  const fs::path base = fs::absolute(path).parent_path();
  std::vector<ServedImage> out;
  try {
    json j = json::parse(in);
    const json& items = j.is_array() ? j : j.at("items");
    for (const auto& e : items) {
      ServedImage img;
      img.image_id = e.at("image_id").get<std::string>();
      img.label_name = e.at("label_name").get<std::string>();
      img.unperturbed = base / e.at("unperturbed").get<std::string>();
      img.perturbed = base / e.at("perturbed").get<std::string>();
      out.push_back(std::move(img));
    }
  } catch (const json::exception& e) {
    throw ConfigError("malformed manifest " + path.string() + ": " + e.what());
  }
  return out;
}

std::vector<LabelItem> label_items(const std::vector<ServedImage>& images) {
  std::vector<LabelItem> items;
  for (const auto& img : images) items.push_back({img.image_id, img.label_name});
  return items;
}

namespace {

void reply_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void reply_error(httplib::Response& res, int status, const std::string& message) {
  reply_json(res, status, json{{"error", message}});
}

int status_for(LabelingFailure f) {
  switch (f) {
    case LabelingFailure::unknown_judge:
    case LabelingFailure::unknown_image: return 404;
    case LabelingFailure::invalid_choice: return 400;
    default: return 409;
  }
}

std::string read_binary(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return {};
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace

struct LabelingServer::Impl {
  LabelingStore& store;
  std::vector<ServedImage> images;
  bool open_enrollment;
  httplib::Server server;

  Impl(LabelingStore& s, std::vector<ServedImage> imgs, bool open)
      : store(s), images(std::move(imgs)), open_enrollment(open) {
    server.Get("/api/task", [this](const httplib::Request& req, httplib::Response& res) { task(req, res); });
    server.Post("/api/vote", [this](const httplib::Request& req, httplib::Response& res) { vote(req, res); });
    server.Get("/api/dispositions", [this](const httplib::Request&, httplib::Response& res) { dispositions(res); });
    server.Get(R"(/images/(\d+)/(unperturbed|perturbed)\.png)",
               [this](const httplib::Request& req, httplib::Response& res) { image(req, res); });
  }

  bool admit(const std::string& judge) {
    if (store.has_judge(judge)) return true;
    if (!open_enrollment || judge.empty()) return false;
    store.register_judge(judge);
    return true;
  }

  void task(const httplib::Request& req, httplib::Response& res) {
    if (!req.has_param("judge")) return reply_error(res, 400, "missing judge parameter");
    const std::string judge = req.get_param_value("judge");
    if (!admit(judge)) return reply_error(res, 404, "unknown judge '" + judge + "'");
    const auto t = store.next_task(judge);
    if (!t) return reply_json(res, 200, nullptr);
    const std::string base = "/images/" + std::to_string(t->item_index);
    reply_json(res, 200,
               json{{"image_id", t->image_id},
                    {"stage", to_string(t->stage)},
                    {"label_name", t->label_name},
                    {"image_url", base + "/unperturbed.png"},
                    {"pair_url", base + "/perturbed.png"}});
  }

  void vote(const httplib::Request& req, httplib::Response& res) {
    VoteRecord v;
    try {
      const json j = json::parse(req.body);
      v.judge = j.at("judge").get<std::string>();
      v.image_id = j.at("image_id").get<std::string>();
      v.stage = stage_from(j.at("stage").get<std::string>());
      v.choice = j.at("choice").get<int>();
    } catch (const json::exception& e) {
      return reply_error(res, 400, std::string("malformed vote: ") + e.what());
    } catch (const Error& e) {
      return reply_error(res, 400, e.what());
    }
    if (!admit(v.judge)) return reply_error(res, 404, "unknown judge '" + v.judge + "'");
    try {
      const VoteAck ack = store.submit_vote(v);
      reply_json(res, 200, json{{"sequence", ack.sequence}, {"duplicate", ack.duplicate}});
    } catch (const LabelingRejected& e) {
      reply_error(res, status_for(e.failure()), e.what());
    }
  }

  void dispositions(httplib::Response& res) {
    json out = json::array();
    for (const auto& d : store.dispositions())
      out.push_back({{"image_id", d.image_id},
                     {"outcome", to_string(d.outcome)},
                     {"unperturbed_tally", d.unperturbed_tally},
                     {"perturbed_tally", d.perturbed_tally}});
    reply_json(res, 200, out);
  }

  void image(const httplib::Request& req, httplib::Response& res) {
    std::size_t index = 0;
    try {
      index = std::stoul(req.matches[1].str());
    } catch (const std::exception&) {
      return reply_error(res, 404, "no such image");
    }
    if (index >= images.size()) return reply_error(res, 404, "no such image");
    const auto& img = images[index];
    const std::string bytes = read_binary(req.matches[2].str() == "perturbed" ? img.perturbed : img.unperturbed);
    if (bytes.empty()) return reply_error(res, 404, "image file missing");
    res.set_content(bytes, "image/png");
  }
};

LabelingServer::LabelingServer(LabelingStore& store, std::vector<ServedImage> images, bool open_enrollment)
    : impl_(std::make_unique<Impl>(store, std::move(images), open_enrollment)) {}

LabelingServer::~LabelingServer() { stop(); }

int LabelingServer::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw Error("cannot bind " + host + ":" + std::to_string(port));
  thread_ = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

void LabelingServer::run(const std::string& host, int port) {
  if (!impl_->server.listen(host, port)) throw Error("cannot listen on " + host + ":" + std::to_string(port));
}

void LabelingServer::stop() {
  impl_->server.stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace lprobe
