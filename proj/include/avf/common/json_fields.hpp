#pragma once

#include <nlohmann/json.hpp>

// to_json/from_json for plain structs. Missing keys keep their default value.
#define AVF_JSON_FROM_OPTIONAL(v1) \
  if (nlohmann_json_j.contains(#v1)) nlohmann_json_j.at(#v1).get_to(nlohmann_json_t.v1);

#define AVF_JSON_FIELDS(Type, ...)                                                               \
  inline void to_json(nlohmann::json& nlohmann_json_j, const Type& nlohmann_json_t) {            \
    NLOHMANN_JSON_EXPAND(NLOHMANN_JSON_PASTE(NLOHMANN_JSON_TO, __VA_ARGS__))                     \
  }                                                                                              \
  inline void from_json(const nlohmann::json& nlohmann_json_j, Type& nlohmann_json_t) {          \
    NLOHMANN_JSON_EXPAND(NLOHMANN_JSON_PASTE(AVF_JSON_FROM_OPTIONAL, __VA_ARGS__))               \
  }
