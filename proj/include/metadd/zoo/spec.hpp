#pragma once

#include <json.hpp>
#include <string>

#include "metadd/core/common.hpp"

namespace metadd::zoo {

enum class ArchFamily { ConvPlain, ConvResidual, ConvMobile, Attention };

inline std::string family_name(ArchFamily f) {
  switch (f) {
    case ArchFamily::ConvPlain: return "conv-plain";
    case ArchFamily::ConvResidual: return "conv-residual";
    case ArchFamily::ConvMobile: return "conv-mobile";
    case ArchFamily::Attention: return "attention";
  }
  return "?";
}

inline ArchFamily family_from_name(const std::string& s) {
  if (s == "conv-plain") return ArchFamily::ConvPlain;
  if (s == "conv-residual") return ArchFamily::ConvResidual;
  if (s == "conv-mobile") return ArchFamily::ConvMobile;
  if (s == "attention") return ArchFamily::Attention;
  throw ConfigError("unknown architecture family '" + s + "'");
}

struct ArchitectureSpec {
  ArchFamily family = ArchFamily::ConvPlain;
  i64 depth = 3;
  i64 width = 32;        // base channels, or embed dim for attention
  i64 patch_size = 0;    // attention only
  i64 num_classes = 10;
  i64 input_resolution = 32;

  void validate() const {
    if (depth <= 0 || width <= 0 || num_classes <= 0 || input_resolution <= 0)
      throw ConfigError("architecture spec requires positive depth/width/"
                        "classes/resolution");
    if (family == ArchFamily::Attention) {
      if (patch_size <= 0)
        throw ConfigError("attention family requires a positive patch size");
      if (input_resolution % patch_size != 0)
        throw ConfigError("input resolution " + std::to_string(input_resolution) +
                          " is not divisible by patch size " +
                          std::to_string(patch_size));
      if (width % 4 != 0)
        throw ConfigError("attention embed dim must be divisible by 4 (heads)");
    } else {
      i64 r = input_resolution;
      i64 halvings = family == ArchFamily::ConvPlain ? depth : 2;
      for (i64 i = 0; i < halvings; ++i) {
        if (r % 2 != 0)
          throw ConfigError("resolution " + std::to_string(input_resolution) +
                            " cannot be pooled " + std::to_string(halvings) +
                            " times for " + family_name(family));
        r /= 2;
      }
    }
  }

  std::string id() const {
    std::string s = family_name(family) + "-d" + std::to_string(depth) + "-w" +
                    std::to_string(width);
    if (family == ArchFamily::Attention) s += "-p" + std::to_string(patch_size);
    s += "-c" + std::to_string(num_classes) + "-r" +
         std::to_string(input_resolution);
    return s;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["family"] = family_name(family);
    j["depth"] = depth;
    j["width"] = width;
    if (family == ArchFamily::Attention) j["patch_size"] = patch_size;
    j["num_classes"] = num_classes;
    j["input_resolution"] = input_resolution;
    return j;
  }

  static ArchitectureSpec from_json(const nlohmann::json& j) {
    ArchitectureSpec s;
    s.family = family_from_name(j.at("family").get<std::string>());
    s.depth = j.at("depth").get<i64>();
    s.width = j.at("width").get<i64>();
    s.patch_size = j.value("patch_size", i64(0));
    s.num_classes = j.at("num_classes").get<i64>();
    s.input_resolution = j.at("input_resolution").get<i64>();
    s.validate();
    return s;
  }

  bool operator==(const ArchitectureSpec&) const = default;
};

}  // namespace metadd::zoo
