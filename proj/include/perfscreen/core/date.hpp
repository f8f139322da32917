#pragma once

#include <chrono>
#include <cstdio>
#include <optional>
#include <string>
#include <string_view>

namespace perfscreen {

/// Calendar date with day resolution. Stored as days since 1970-01-01 so that
/// ordering, hashing and SQLite storage are all plain integer operations.
class Date {
 public:
  constexpr Date() = default;
  constexpr explicit Date(std::int32_t days_since_epoch) : days_(days_since_epoch) {}

  static Date from_ymd(int y, unsigned m, unsigned d) {
    const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{m},
                                          std::chrono::day{d}};
    return Date(static_cast<std::int32_t>(std::chrono::sys_days{ymd}.time_since_epoch().count()));
  }

  static Date today() {
    const auto now = std::chrono::floor<std::chrono::days>(std::chrono::system_clock::now());
    return Date(static_cast<std::int32_t>(now.time_since_epoch().count()));
  }

  /// Accepts `YYYY-MM-DD`, optionally followed by a `T...` or space time part
  /// (ISO-8601 timestamps are truncated to their date).
  static std::optional<Date> parse(std::string_view text) {
    while (!text.empty() && (text.front() == ' ' || text.front() == '\t')) text.remove_prefix(1);
    while (!text.empty() && (text.back() == ' ' || text.back() == '\t' || text.back() == '\r'))
      text.remove_suffix(1);
    if (text.size() > 10) {
      if (text[10] != 'T' && text[10] != ' ') return std::nullopt;
      text = text.substr(0, 10);
    }
    if (text.size() != 10 || text[4] != '-' || text[7] != '-') return std::nullopt;
    int parts[3] = {0, 0, 0};
    const std::size_t starts[3] = {0, 5, 8};
    const std::size_t lens[3] = {4, 2, 2};
    for (int p = 0; p < 3; ++p) {
      for (std::size_t i = 0; i < lens[p]; ++i) {
        const char c = text[starts[p] + i];
        if (c < '0' || c > '9') return std::nullopt;
        parts[p] = parts[p] * 10 + (c - '0');
      }
    }
    const std::chrono::year_month_day ymd{std::chrono::year{parts[0]},
                                          std::chrono::month{static_cast<unsigned>(parts[1])},
                                          std::chrono::day{static_cast<unsigned>(parts[2])}};
    if (!ymd.ok()) return std::nullopt;
    return Date(static_cast<std::int32_t>(std::chrono::sys_days{ymd}.time_since_epoch().count()));
  }

  [[nodiscard]] std::chrono::year_month_day ymd() const {
    return std::chrono::year_month_day{std::chrono::sys_days{std::chrono::days{days_}}};
  }

  [[nodiscard]] std::string iso() const {
    const auto v = ymd();
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(v.year()),
                  static_cast<unsigned>(v.month()), static_cast<unsigned>(v.day()));
    return buf;
  }

  [[nodiscard]] constexpr std::int32_t days() const { return days_; }
  [[nodiscard]] int year() const { return static_cast<int>(ymd().year()); }

  [[nodiscard]] constexpr Date plus_days(std::int32_t n) const { return Date(days_ + n); }

  /// Fractional years between two dates using the mean Gregorian year.
  [[nodiscard]] static constexpr double years_between(Date from, Date to) {
    return static_cast<double>(to.days_ - from.days_) / 365.2425;
  }

  friend constexpr auto operator<=>(Date, Date) = default;
  friend constexpr bool operator==(Date, Date) = default;

 private:
  std::int32_t days_ = 0;
};

}  // namespace perfscreen
