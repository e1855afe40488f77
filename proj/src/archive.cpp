#include "lprobe/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "lprobe/error.hpp"

namespace lprobe {

namespace {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

const char* activation_name(ActivationKind k) {
  switch (k) {
    case ActivationKind::relu: return "relu";
    case ActivationKind::leaky_relu: return "leaky_relu";
    case ActivationKind::sigmoid: return "sigmoid";
    case ActivationKind::tanh: return "tanh";
  }
  return "relu";
}

ActivationKind activation_from(const std::string& s) {
  if (s == "relu") return ActivationKind::relu;
  if (s == "leaky_relu") return ActivationKind::leaky_relu;
  if (s == "sigmoid") return ActivationKind::sigmoid;
  if (s == "tanh") return ActivationKind::tanh;
  throw ArchiveError("unknown activation '" + s + "'");
}

json geometry_json(const kernels::ConvGeometry& g) {
  return {{"stride", g.stride}, {"padding", g.padding}, {"output_padding", g.output_padding}};
}

kernels::ConvGeometry geometry_from(const json& j) {
  kernels::ConvGeometry g;
  g.stride = j.at("stride").get<std::size_t>();
  g.padding = j.at("padding").get<std::size_t>();
  g.output_padding = j.value("output_padding", std::size_t{0});
  return g;
}

json layer_json(const LayerSpec& layer) {
  json j{{"name", layer.name}, {"kind", layer_kind_name(layer.op)}, {"output_shape", layer.output_shape}};
  if (auto* d = std::get_if<DenseLayer>(&layer.op)) {
    j["in_features"] = d->in_features;
    j["out_features"] = d->out_features;
    j["weight"] = d->weight;
    j["bias"] = d->bias;
  } else if (auto* c = std::get_if<Conv2dLayer>(&layer.op)) {
    j.update({{"in_channels", c->in_channels}, {"out_channels", c->out_channels}, {"kernel", c->kernel},
              {"weight", c->weight}, {"bias", c->bias}});
    j.update(geometry_json(c->geometry));
  } else if (auto* t = std::get_if<ConvTranspose2dLayer>(&layer.op)) {
    j.update({{"in_channels", t->in_channels}, {"out_channels", t->out_channels}, {"kernel", t->kernel},
              {"weight", t->weight}, {"bias", t->bias}});
    j.update(geometry_json(t->geometry));
  } else if (auto* b = std::get_if<BatchNormLayer>(&layer.op)) {
    j.update({{"channels", b->channels}, {"eps", b->eps}, {"mean", b->mean}, {"var", b->var}, {"gamma", b->gamma},
              {"beta", b->beta}});
  } else if (auto* a = std::get_if<ActivationLayer>(&layer.op)) {
    j["activation"] = activation_name(a->kind);
  } else if (auto* r = std::get_if<ReshapeLayer>(&layer.op)) {
    j["shape"] = r->shape;
  } else if (auto* u = std::get_if<UpsampleNearestLayer>(&layer.op)) {
    j["factor"] = u->factor;
  } else if (auto* p = std::get_if<DropoutLayer>(&layer.op)) {
    j["p"] = p->p;
  }
  return j;
}

LayerSpec layer_from(const json& j) {
  LayerSpec layer;
  layer.name = j.value("name", std::string{});
  layer.output_shape = j.value("output_shape", Shape{});
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "dense") {
    layer.op = DenseLayer{j.at("in_features"), j.at("out_features"), j.at("weight"), j.at("bias")};
  } else if (kind == "conv2d") {
    layer.op = Conv2dLayer{j.at("in_channels"), j.at("out_channels"), j.at("kernel"), geometry_from(j),
                           j.at("weight"), j.value("bias", std::string{})};
  } else if (kind == "conv_transpose2d") {
    layer.op = ConvTranspose2dLayer{j.at("in_channels"), j.at("out_channels"), j.at("kernel"), geometry_from(j),
                                    j.at("weight"), j.value("bias", std::string{})};
  } else if (kind == "batchnorm") {
    layer.op = BatchNormLayer{j.at("channels"), j.at("eps"), j.at("mean"), j.at("var"), j.at("gamma"), j.at("beta")};
  } else if (kind == "activation") {
    layer.op = ActivationLayer{activation_from(j.at("activation"))};
  } else if (kind == "reshape") {
    layer.op = ReshapeLayer{j.at("shape").get<Shape>()};
  } else if (kind == "upsample_nearest") {
    layer.op = UpsampleNearestLayer{j.at("factor")};
  } else if (kind == "dropout_identity") {
    layer.op = DropoutLayer{j.value("p", 0.0f)};
  } else {
    throw ArchiveError("unknown layer kind '" + kind + "'");
  }
  return layer;
}

void put_u64(std::string& out, std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

}  // namespace

std::string serialize_archive(const Network& network, const std::optional<SigmaProfile>& sigma) {
  const auto& spec = network.spec();
  json header;
  header["format_version"] = kArchiveFormatVersion;
  json net;
  net["role"] = spec.role == NetworkRole::generator ? "generator" : "classifier";
  net["width"] = spec.width;
  net["input_shape"] = spec.input_shape;
  net["injection_points"] = spec.injection_points;
  net["layers"] = json::array();
  for (const auto& layer : spec.layers) net["layers"].push_back(layer_json(layer));
  header["network"] = std::move(net);

  std::vector<std::pair<std::string, const Tensor*>> entries;
  for (const auto& [name, tensor] : network.weights()) entries.emplace_back(name, tensor.get());
  if (sigma) {
    if (sigma->sigma.size() != network.injection_count())
      throw ShapeError("sigma profile does not match the network's injection points");
    for (std::size_t i = 0; i < sigma->sigma.size(); ++i)
      entries.emplace_back("sigma." + std::to_string(i), &sigma->sigma[i]);
    header["sigma"] = {{"sample_count", sigma->sample_count}, {"seed", sigma->seed}, {"floor", sigma->floor}};
  }

  json directory = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : entries) {
    directory.push_back({{"name", name}, {"shape", tensor->shape()}, {"offset", offset}});
    offset += tensor->size() * sizeof(float);
  }
  header["tensors"] = std::move(directory);

  const std::string text = header.dump();
  std::string out(kArchiveMagic, sizeof(kArchiveMagic));
  put_u64(out, text.size());
  out += text;
  for (const auto& [name, tensor] : entries)
    out.append(reinterpret_cast<const char*>(tensor->data().data()), tensor->size() * sizeof(float));
  return out;
}

Archive deserialize_archive(const std::string& bytes) {
  if (bytes.size() < 16) throw ArchiveError("truncated archive: missing header");
  if (std::memcmp(bytes.data(), kArchiveMagic, 6) != 0) throw ArchiveError("bad magic: not an LPROBE archive");
  if (std::memcmp(bytes.data(), kArchiveMagic, 8) != 0)
    throw ArchiveError("unsupported archive version '" + bytes.substr(6, 2) + "'");
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data() + 8, 8);
  if (header_len > bytes.size() - 16) throw ArchiveError("truncated archive: header extends past end of file");

  json header;
  try {
    header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::exception& e) {
    throw ArchiveError(std::string("malformed archive header: ") + e.what());
  }
  if (header.value("format_version", 0) != kArchiveFormatVersion)
    throw ArchiveError("archive format version mismatch: expected " + std::to_string(kArchiveFormatVersion));

  const std::size_t payload = 16 + header_len;
  std::map<std::string, Tensor> tensors;
  try {
    for (const auto& entry : header.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const std::size_t count = shape_size(shape);
      if (offset > bytes.size() - payload || count * sizeof(float) > bytes.size() - payload - offset)
        throw ArchiveError("truncated archive: tensor '" + name + "' extends past end of file");
      std::vector<float> data(count);
      std::memcpy(data.data(), bytes.data() + payload + offset, count * sizeof(float));
      tensors.insert_or_assign(name, Tensor(shape, std::move(data)));
    }

    const auto& net = header.at("network");
    NetworkSpec spec;
    const auto role = net.at("role").get<std::string>();
    if (role != "generator" && role != "classifier") throw ArchiveError("unknown network role '" + role + "'");
    spec.role = role == "generator" ? NetworkRole::generator : NetworkRole::classifier;
    spec.width = net.at("width");
    spec.input_shape = net.at("input_shape").get<Shape>();
    spec.injection_points = net.at("injection_points").get<std::vector<std::size_t>>();
    for (const auto& layer : net.at("layers")) spec.layers.push_back(layer_from(layer));

    std::optional<SigmaProfile> sigma;
    if (header.contains("sigma")) {
      SigmaProfile s;
      s.sample_count = header["sigma"].at("sample_count");
      s.seed = header["sigma"].at("seed");
      s.floor = header["sigma"].at("floor");
      for (std::size_t i = 0; i < spec.injection_points.size(); ++i) {
        auto it = tensors.find("sigma." + std::to_string(i));
        if (it == tensors.end()) throw ArchiveError("sigma profile missing tensor sigma." + std::to_string(i));
        s.sigma.push_back(std::move(it->second));
        tensors.erase(it);
      }
      sigma = std::move(s);
    }

    WeightMap weights;
    for (auto& [name, tensor] : tensors) weights.emplace(name, std::make_shared<const Tensor>(std::move(tensor)));
    Archive archive{Network(std::move(spec), std::move(weights)), std::move(sigma)};
    if (archive.sigma) {
      for (std::size_t i = 0; i < archive.network.injection_count(); ++i)
        if (archive.sigma->sigma[i].shape() != archive.network.injection_shape(i))
          throw ShapeError("sigma." + std::to_string(i) + " does not match injection point shape");
    }
    return archive;
  } catch (const json::exception& e) {
    throw ArchiveError(std::string("malformed archive header: ") + e.what());
  }
}

void save_archive(const std::filesystem::path& path, const Network& network, const std::optional<SigmaProfile>& sigma) {
  const std::string bytes = serialize_archive(network, sigma);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ArchiveError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ArchiveError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Archive load_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArchiveError("cannot open archive " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize_archive(buf.str());
}

}  // namespace lprobe
