#pragma once

#include "perfscreen/core/date.hpp"
#include "perfscreen/core/errors.hpp"

#include <string>
#include <string_view>
#include <vector>

namespace perfscreen {

enum class Gender { men, women, mixed };

inline std::string_view to_string(Gender g) {
  switch (g) {
    case Gender::men: return "men";
    case Gender::women: return "women";
    case Gender::mixed: break;
  }
  return "mixed";
}

/// Gender implied by an event code suffix ("100m-men" -> men).
inline Gender gender_of(std::string_view event_code) {
  if (event_code.ends_with("-women")) return Gender::women;
  if (event_code.ends_with("-men")) return Gender::men;
  return Gender::mixed;
}

/// One event/gender/date-window selection. Text form (used as cache key,
/// CLI argument and API parameter):
///
///     <event_code>[:<from>:<to>[:legal|all]]
///
/// e.g. `100m-men:2010-01-01:2025-12-31:legal`. Omitted dates default to
/// 1990-01-01 and 9999-12-31; the wind filter defaults to `legal`.
struct EventSlice {
  std::string event_code;
  Gender gender = Gender::mixed;
  Date date_from = Date::from_ymd(1990, 1, 1);
  Date date_to = Date::from_ymd(9999, 12, 31);
  bool wind_legal_only = true;

  static EventSlice make(std::string event_code, Date from, Date to, bool wind_legal_only = true) {
    EventSlice s;
    s.gender = gender_of(event_code);
    s.event_code = std::move(event_code);
    s.date_from = from;
    s.date_to = to;
    s.wind_legal_only = wind_legal_only;
    s.validate();
    return s;
  }

  void validate() const {
    if (event_code.empty()) throw InvalidSlice("slice needs an event code");
    if (date_to < date_from) throw InvalidSlice("slice date_from must not exceed date_to");
    if (gender != gender_of(event_code))
      throw InvalidSlice("gender does not match event code " + event_code);
  }

  static EventSlice parse(std::string_view text) {
    std::vector<std::string> parts;
    std::size_t pos = 0;
    while (true) {
      const auto c = text.find(':', pos);
      parts.emplace_back(text.substr(pos, c == std::string_view::npos ? std::string_view::npos : c - pos));
      if (c == std::string_view::npos) break;
      pos = c + 1;
    }
    if (parts.size() != 1 && parts.size() != 3 && parts.size() != 4)
      throw InvalidSlice("slice must look like event[:from:to[:legal|all]]");
    EventSlice s;
    s.event_code = parts[0];
    s.gender = gender_of(s.event_code);
    if (parts.size() >= 3) {
      const auto from = Date::parse(parts[1]);
      const auto to = Date::parse(parts[2]);
      if (!from || !to) throw InvalidSlice("slice dates must be YYYY-MM-DD");
      s.date_from = *from;
      s.date_to = *to;
    }
    if (parts.size() == 4) {
      if (parts[3] == "legal") {
        s.wind_legal_only = true;
      } else if (parts[3] == "all") {
        s.wind_legal_only = false;
      } else {
        throw InvalidSlice("slice wind filter must be 'legal' or 'all'");
      }
    }
    s.validate();
    return s;
  }

  [[nodiscard]] std::string key() const {
    return event_code + ":" + date_from.iso() + ":" + date_to.iso() + ":" +
           (wind_legal_only ? "legal" : "all");
  }

  friend bool operator==(const EventSlice&, const EventSlice&) = default;
};

}  // namespace perfscreen
