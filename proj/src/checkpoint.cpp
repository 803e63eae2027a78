#include "upinn/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "upinn/error.hpp"

namespace upinn::checkpoint {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'U', 'P', 'I', 'N', 'N', 'C', 'K', '\0'};

template <typename T>
void put(std::string& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    out.append(bytes.data(), sizeof(T));
  } else {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
  }
}

template <typename T>
T get(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) {
    throw ConfigError("checkpoint is truncated");
  }
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), in.data() + pos, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes.begin(), bytes.end());
  }
  pos += sizeof(T);
  return std::bit_cast<T>(bytes);
}

json net_json(const nn::MLP& net) {
  return {{"spec", spec_to_json(net.spec())},
          {"frozen", net.frozen()},
          {"parameters", net.params().size()}};
}

nn::MLP net_from_json(const json& j) {
  nn::MLP net(spec_from_json(j.at("spec")));
  if (j.at("parameters").get<std::size_t>() != net.params().size()) {
    throw ConfigError("checkpoint parameter count does not match its spec");
  }
  if (j.at("frozen").get<bool>()) {
    net.freeze();
  }
  return net;
}

}  // namespace

json spec_to_json(const nn::MLPSpec& s) {
  return {{"input_dim", s.input_dim},
          {"hidden", s.hidden},
          {"output_dim", s.output_dim},
          {"activation", nn::to_string(s.activation)},
          {"final_linear", s.final_linear}};
}

nn::MLPSpec spec_from_json(const json& j) {
  nn::MLPSpec s;
  s.input_dim = j.at("input_dim").get<std::size_t>();
  s.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  s.output_dim = j.at("output_dim").get<std::size_t>();
  s.activation = nn::parse_activation(j.at("activation").get<std::string>());
  s.final_linear = j.at("final_linear").get<bool>();
  s.validate();
  return s;
}

std::string serialize(const Checkpoint& ck) {
  ck.model.validate();
  json header;
  header["kind"] = ck.kind;
  header["config"] = ck.config;
  header["epoch"] = ck.epoch;
  header["rng"] = ck.rng_state;
  header["family"] = ck.model.family;
  header["extra"] = ck.extra;
  json groups = json::array();
  for (const auto& g : ck.model.groups) {
    json heads = json::array();
    for (const auto& h : g.heads) {
      heads.push_back(net_json(h));
    }
    groups.push_back({{"name", g.name}, {"body", net_json(g.body)}, {"heads", heads}});
  }
  header["groups"] = groups;
  const std::string text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  put<std::uint64_t>(out, ck.config_hash);
  put<std::uint64_t>(out, text.size());
  out += text;
  auto dump = [&](const nn::MLP& net) {
    for (double v : net.params()) {
      put<double>(out, v);
    }
  };
  for (const auto& g : ck.model.groups) {
    dump(g.body);
    for (const auto& h : g.heads) {
      dump(h);
    }
  }
  return out;
}

Checkpoint deserialize(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw ConfigError("not a checkpoint file (bad magic)");
  }
  std::size_t pos = sizeof(kMagic);
  const auto version = get<std::uint32_t>(bytes, pos);
  if (version != kVersion) {
    throw ConfigError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.config_hash = get<std::uint64_t>(bytes, pos);
  const auto len = get<std::uint64_t>(bytes, pos);
  if (pos + len > bytes.size()) {
    throw ConfigError("checkpoint is truncated");
  }
  json header;
  try {
    header = json::parse(bytes.substr(pos, len));
    pos += len;
    ck.kind = header.at("kind").get<std::string>();
    ck.config = header.at("config");
    ck.epoch = header.at("epoch").get<std::size_t>();
    ck.rng_state = header.at("rng").get<std::string>();
    ck.model.family = header.at("family").get<std::vector<double>>();
    ck.extra = header.value("extra", json::object());
    for (const auto& g : header.at("groups")) {
      nn::BodyGroup bg;
      bg.name = g.at("name").get<std::string>();
      bg.body = net_from_json(g.at("body"));
      for (const auto& h : g.at("heads")) {
        bg.heads.push_back(net_from_json(h));
      }
      ck.model.groups.push_back(std::move(bg));
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("corrupt checkpoint header: ") + e.what());
  }
  auto fill = [&](nn::MLP& net) {
    for (double& v : net.params()) {
      v = get<double>(bytes, pos);
    }
  };
  for (auto& g : ck.model.groups) {
    fill(g.body);
    for (auto& h : g.heads) {
      fill(h);
    }
  }
  if (pos != bytes.size()) {
    throw ConfigError("checkpoint has trailing bytes");
  }
  ck.model.validate();
  return ck;
}

void save(const std::string& path, const Checkpoint& ck) {
  const std::string bytes = serialize(ck);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) {
      throw ConfigError("cannot write checkpoint " + tmp);
    }
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) {
      throw ConfigError("failed writing checkpoint " + tmp);
    }
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) {
    throw ConfigError("cannot open checkpoint " + path);
  }
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize(ss.str());
}

}  // namespace upinn::checkpoint
