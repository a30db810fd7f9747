#include "coslin/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

namespace coslin {

// ---- Date ------------------------------------------------------------------

namespace {

constexpr int days_in_month(int y, int m) {
    constexpr int lengths[] = {31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
    if (m == 2) {
        const bool leap = (y % 4 == 0 && y % 100 != 0) || y % 400 == 0;
        return leap ? 29 : 28;
    }
    return lengths[m - 1];
}

} // namespace

bool Date::valid() const {
    return month >= 1 && month <= 12 && day >= 1 && day <= days_in_month(year, month);
}

long long Date::serial() const {
    // Howard Hinnant's civil-to-days algorithm.
    int y = year;
    const unsigned m = static_cast<unsigned>(month);
    const unsigned d = static_cast<unsigned>(day);
    y -= m <= 2;
    const long long era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<long long>(doe) - 719468;
}

Date Date::from_serial(long long days) {
    long long z = days + 719468;
    const long long era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const long long y = static_cast<long long>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    const unsigned d = doy - (153 * mp + 2) / 5 + 1;
    const unsigned m = mp < 10 ? mp + 3 : mp - 9;
    return Date{static_cast<int>(y + (m <= 2)), static_cast<int>(m), static_cast<int>(d)};
}

std::optional<Date> Date::parse(const std::string& iso) {
    if (iso.size() != 10 || iso[4] != '-' || iso[7] != '-') return std::nullopt;
    auto num = [&](std::size_t pos, std::size_t len, int& out) {
        auto res = std::from_chars(iso.data() + pos, iso.data() + pos + len, out);
        return res.ec == std::errc{} && res.ptr == iso.data() + pos + len;
    };
    Date d;
    if (!num(0, 4, d.year) || !num(5, 2, d.month) || !num(8, 2, d.day)) return std::nullopt;
    if (!d.valid()) return std::nullopt;
    return d;
}

std::string Date::to_string() const {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d-%02d-%02d", year, month, day);
    return buf;
}

// ---- names -----------------------------------------------------------------

const char* pollutant_name(Pollutant p) {
    switch (p) {
        case Pollutant::Pm25: return "pm25";
        case Pollutant::Pm10: return "pm10";
        case Pollutant::No2: return "no2";
        case Pollutant::O3: return "o3";
        case Pollutant::So2: return "so2";
        case Pollutant::Co: return "co";
    }
    return "?";
}

const char* pollutant_column(Pollutant p) {
    switch (p) {
        case Pollutant::Pm25: return "pm25_med";
        case Pollutant::Pm10: return "pm10_med";
        case Pollutant::No2: return "no2_med";
        case Pollutant::O3: return "o3_med";
        case Pollutant::So2: return "so2_med";
        case Pollutant::Co: return "co_med";
    }
    return "?";
}

std::optional<Pollutant> parse_pollutant(const std::string& name) {
    for (Pollutant p : kAllPollutants) {
        if (name == pollutant_name(p)) return p;
    }
    return std::nullopt;
}

const char* fuel_name(FuelType f) {
    switch (f) {
        case FuelType::Coal: return "coal";
        case FuelType::Oil: return "oil";
        case FuelType::Gas: return "gas";
        case FuelType::Biomass: return "biomass";
    }
    return "?";
}

std::optional<FuelType> parse_fuel(const std::string& name) {
    if (name == "coal") return FuelType::Coal;
    if (name == "oil") return FuelType::Oil;
    if (name == "gas") return FuelType::Gas;
    if (name == "biomass") return FuelType::Biomass;
    return std::nullopt;
}

// ---- CSV -------------------------------------------------------------------

const char* const kSamplesHeader =
    "city,date,pm25_med,pm10_med,no2_med,o3_med,so2_med,co_med,pop_home,traffic_mmiles,"
    "pressure,humidity,temperature,dew,wind_gust,wind_speed";
const char* const kPlantsHeader = "plant_id,lat,lon,fuel,year,month,gen_daily_avg";
const char* const kCitiesHeader = "city,lat,lon";

namespace {

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find(',', start);
        if (pos == std::string::npos) {
            fields.push_back(line.substr(start));
            break;
        }
        fields.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return fields;
}

bool read_line(std::istream& in, std::string& line) {
    if (!std::getline(in, line)) return false;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
}

[[noreturn]] void row_error(const char* file, std::size_t line_no, const std::string& what) {
    throw DataError(std::string(file) + " line " + std::to_string(line_no) + ": " + what);
}

double parse_double_field(const std::string& field, const char* file, std::size_t line_no,
                          const char* column) {
    double v{};
    auto res = std::from_chars(field.data(), field.data() + field.size(), v);
    if (res.ec != std::errc{} || res.ptr != field.data() + field.size()) {
        row_error(file, line_no, std::string("cannot parse ") + column + " value '" + field + "'");
    }
    if (!std::isfinite(v)) {
        row_error(file, line_no, std::string(column) + " is not finite");
    }
    return v;
}

std::optional<double> parse_optional_field(const std::string& field, const char* file,
                                           std::size_t line_no, const char* column) {
    if (field.empty()) return std::nullopt;
    return parse_double_field(field, file, line_no, column);
}

long long parse_int_field(const std::string& field, const char* file, std::size_t line_no,
                          const char* column) {
    long long v{};
    auto res = std::from_chars(field.data(), field.data() + field.size(), v);
    if (res.ec != std::errc{} || res.ptr != field.data() + field.size()) {
        row_error(file, line_no, std::string("cannot parse ") + column + " value '" + field + "'");
    }
    return v;
}

void expect_header(std::istream& in, const char* expected, const char* file) {
    std::string line;
    if (!read_line(in, line)) {
        throw DataError(std::string(file) + ": empty input, expected header '" + expected + "'");
    }
    if (line != expected) {
        throw DataError(std::string(file) + ": header mismatch, expected '" + expected +
                        "' got '" + line + "'");
    }
}

std::string format_double(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v); // shortest round-trip form
    return std::string(buf, res.ptr);
}

void check_coordinates(double lat, double lon, const char* file, std::size_t line_no) {
    if (lat < -90.0 || lat > 90.0 || lon < -180.0 || lon > 180.0) {
        row_error(file, line_no,
                  "coordinates out of range (" + format_double(lat) + ", " + format_double(lon) + ")");
    }
}

} // namespace

std::vector<SampleRecord> parse_records(std::istream& in) {
    constexpr const char* kFile = "samples.csv";
    expect_header(in, kSamplesHeader, kFile);
    std::vector<SampleRecord> records;
    std::map<std::pair<std::string, Date>, std::size_t> seen;
    std::string line;
    std::size_t line_no = 1;
    while (read_line(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto fields = split_line(line);
        if (fields.size() != 16) {
            row_error(kFile, line_no,
                      "expected 16 fields, got " + std::to_string(fields.size()));
        }
        SampleRecord rec;
        rec.city = fields[0];
        if (rec.city.empty()) row_error(kFile, line_no, "empty city");
        auto date = Date::parse(fields[1]);
        if (!date) row_error(kFile, line_no, "invalid date '" + fields[1] + "'");
        rec.date = *date;
        for (std::size_t t = 0; t < 6; ++t) {
            rec.targets[t] =
                parse_optional_field(fields[2 + t], kFile, line_no, pollutant_column(kAllPollutants[t]));
        }
        for (std::size_t f = 0; f < kRawFeatureCount; ++f) {
            rec.features[f] = parse_optional_field(fields[8 + f], kFile, line_no, kFeatureNames[f]);
        }
        if (rec.features[1] && *rec.features[1] < 0.0) {
            row_error(kFile, line_no, "traffic_mmiles must be non-negative");
        }
        auto key = std::make_pair(rec.city, rec.date);
        auto [it, inserted] = seen.emplace(key, line_no);
        if (!inserted) {
            row_error(kFile, line_no,
                      "duplicate (city, date) = (" + rec.city + ", " + rec.date.to_string() +
                      "), first seen at line " + std::to_string(it->second));
        }
        records.push_back(std::move(rec));
    }
    return records;
}

void write_records(std::ostream& out, const std::vector<SampleRecord>& records) {
    out << kSamplesHeader << '\n';
    for (const SampleRecord& rec : records) {
        out << rec.city << ',' << rec.date.to_string();
        for (std::size_t t = 0; t < 6; ++t) {
            out << ',';
            if (rec.targets[t]) out << format_double(*rec.targets[t]);
        }
        for (std::size_t f = 0; f < kRawFeatureCount; ++f) {
            out << ',';
            if (rec.features[f]) out << format_double(*rec.features[f]);
        }
        out << '\n';
    }
}

std::map<std::string, CityMeta> parse_cities(std::istream& in) {
    constexpr const char* kFile = "cities.csv";
    expect_header(in, kCitiesHeader, kFile);
    std::map<std::string, CityMeta> cities;
    std::string line;
    std::size_t line_no = 1;
    while (read_line(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto fields = split_line(line);
        if (fields.size() != 3) {
            row_error(kFile, line_no, "expected 3 fields, got " + std::to_string(fields.size()));
        }
        CityMeta meta;
        meta.city = fields[0];
        if (meta.city.empty()) row_error(kFile, line_no, "empty city");
        meta.lat = parse_double_field(fields[1], kFile, line_no, "lat");
        meta.lon = parse_double_field(fields[2], kFile, line_no, "lon");
        check_coordinates(meta.lat, meta.lon, kFile, line_no);
        if (!cities.emplace(meta.city, meta).second) {
            row_error(kFile, line_no, "duplicate city '" + meta.city + "'");
        }
    }
    return cities;
}

std::vector<PowerPlant> parse_plants(std::istream& in) {
    constexpr const char* kFile = "plants.csv";
    expect_header(in, kPlantsHeader, kFile);
    std::map<std::string, PowerPlant> by_id;
    std::vector<std::string> order;
    std::string line;
    std::size_t line_no = 1;
    while (read_line(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto fields = split_line(line);
        if (fields.size() != 7) {
            row_error(kFile, line_no, "expected 7 fields, got " + std::to_string(fields.size()));
        }
        const std::string& id = fields[0];
        if (id.empty()) row_error(kFile, line_no, "empty plant_id");
        const double lat = parse_double_field(fields[1], kFile, line_no, "lat");
        const double lon = parse_double_field(fields[2], kFile, line_no, "lon");
        check_coordinates(lat, lon, kFile, line_no);
        const auto fuel = parse_fuel(fields[3]);
        if (!fuel) row_error(kFile, line_no, "unknown fuel '" + fields[3] + "'");
        const long long year = parse_int_field(fields[4], kFile, line_no, "year");
        const long long month = parse_int_field(fields[5], kFile, line_no, "month");
        if (month < 1 || month > 12) row_error(kFile, line_no, "month out of range");
        const double gen = parse_double_field(fields[6], kFile, line_no, "gen_daily_avg");
        if (gen < 0.0) row_error(kFile, line_no, "gen_daily_avg must be non-negative");

        auto it = by_id.find(id);
        if (it == by_id.end()) {
            PowerPlant plant;
            plant.id = id;
            plant.lat = lat;
            plant.lon = lon;
            plant.fuel = *fuel;
            it = by_id.emplace(id, std::move(plant)).first;
            order.push_back(id);
        } else if (it->second.lat != lat || it->second.lon != lon) {
            row_error(kFile, line_no, "plant '" + id + "' re-declared with different coordinates");
        }
        auto key = std::make_pair(static_cast<int>(year), static_cast<int>(month));
        if (!it->second.monthly_gen.emplace(key, gen).second) {
            row_error(kFile, line_no,
                      "duplicate (plant, year, month) = (" + id + ", " + fields[4] + ", " +
                      fields[5] + ")");
        }
    }
    std::vector<PowerPlant> plants;
    plants.reserve(order.size());
    for (const std::string& id : order) plants.push_back(std::move(by_id[id]));
    return plants;
}

// ---- spatial feature --------------------------------------------------------

double haversine_km(double lat1, double lon1, double lat2, double lon2) {
    constexpr double kEarthRadiusKm = 6371.0;
    constexpr double kDegToRad = 3.141592653589793238462643383279502884 / 180.0;
    const double phi1 = lat1 * kDegToRad;
    const double phi2 = lat2 * kDegToRad;
    const double dphi = (lat2 - lat1) * kDegToRad;
    const double dlam = (lon2 - lon1) * kDegToRad;
    const double s1 = std::sin(dphi / 2.0);
    const double s2 = std::sin(dlam / 2.0);
    const double h = s1 * s1 + std::cos(phi1) * std::cos(phi2) * s2 * s2;
    return 2.0 * kEarthRadiusKm * std::asin(std::min(1.0, std::sqrt(h)));
}

double power_plant_feature(const CityMeta& city, const std::vector<PowerPlant>& plants,
                           int year, int month) {
    double total = 0.0;
    for (const PowerPlant& plant : plants) {
        const double r = haversine_km(city.lat, city.lon, plant.lat, plant.lon);
        if (!(r < kPowerPlantRadiusKm)) continue; // strict cutoff: r == 30.0 contributes 0
        auto it = plant.monthly_gen.find({year, month});
        if (it == plant.monthly_gen.end()) continue;
        total += it->second / (r * r);
    }
    return total;
}

void attach_power_plant_feature(std::vector<SampleRecord>& records,
                                const std::map<std::string, CityMeta>& cities,
                                const std::vector<PowerPlant>& plants) {
    std::map<std::tuple<std::string, int, int>, double> cache;
    for (SampleRecord& rec : records) {
        auto city_it = cities.find(rec.city);
        if (city_it == cities.end()) {
            throw DataError("attach_power_plant_feature: city '" + rec.city +
                            "' missing from cities.csv");
        }
        auto key = std::make_tuple(rec.city, rec.date.year, rec.date.month);
        auto it = cache.find(key);
        if (it == cache.end()) {
            it = cache.emplace(key, power_plant_feature(city_it->second, plants, rec.date.year,
                                                        rec.date.month))
                     .first;
        }
        rec.features[kPowerPlantFeature] = it->second;
    }
}

// ---- split / impute / windows -----------------------------------------------

bool in_test_range(const Date& d) { return d >= kTestStart && d <= kTestEnd; }

std::pair<std::vector<SampleRecord>, std::vector<SampleRecord>> split_train_test(
    const std::vector<SampleRecord>& records) {
    std::vector<SampleRecord> train, test;
    for (const SampleRecord& rec : records) {
        (in_test_range(rec.date) ? test : train).push_back(rec);
    }
    return {std::move(train), std::move(test)};
}

namespace {

void sort_by_city_date(std::vector<SampleRecord>& records) {
    std::sort(records.begin(), records.end(), [](const SampleRecord& a, const SampleRecord& b) {
        if (a.city != b.city) return a.city < b.city;
        return a.date < b.date;
    });
}

double median_of(std::vector<double> values) {
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

} // namespace

std::vector<SampleRecord> impute(std::vector<SampleRecord> records) {
    sort_by_city_date(records);
    std::size_t begin = 0;
    while (begin < records.size()) {
        std::size_t end = begin;
        while (end < records.size() && records[end].city == records[begin].city) ++end;

        for (std::size_t f = 0; f < kFeatureCount; ++f) {
            // Training-period median, computed lazily: only a leading gap needs it.
            std::optional<double> train_median;
            auto median_for = [&]() -> double {
                if (!train_median) {
                    std::vector<double> observed;
                    for (std::size_t i = begin; i < end; ++i) {
                        if (records[i].features[f] && !in_test_range(records[i].date)) {
                            observed.push_back(*records[i].features[f]);
                        }
                    }
                    if (observed.empty()) {
                        throw DataError("impute: city '" + records[begin].city +
                                        "' has no training-period observations of feature '" +
                                        kFeatureNames[f] + "'");
                    }
                    train_median = median_of(std::move(observed));
                }
                return *train_median;
            };
            std::optional<double> last;
            for (std::size_t i = begin; i < end; ++i) {
                if (records[i].features[f]) {
                    last = records[i].features[f];
                } else {
                    records[i].features[f] = last ? *last : median_for();
                }
            }
        }
        begin = end;
    }
    return records;
}

std::vector<SeriesWindow> build_windows(const std::vector<SampleRecord>& input,
                                        Pollutant pollutant, int seq_len) {
    if (seq_len < 1) {
        throw ConfigError("build_windows: seq_len must be >= 1, got " + std::to_string(seq_len));
    }
    std::vector<SampleRecord> records = input;
    sort_by_city_date(records);
    const std::size_t t = static_cast<std::size_t>(pollutant);
    const std::size_t length = static_cast<std::size_t>(seq_len);
    const std::size_t n_features = kFeatureCount + 1;

    std::vector<SeriesWindow> windows;
    std::size_t begin = 0;
    while (begin < records.size()) {
        std::size_t end = begin;
        while (end < records.size() && records[end].city == records[begin].city) ++end;

        // Most recent observed pollutant value strictly before each day.
        const std::size_t count = end - begin;
        std::vector<std::optional<double>> prev_value(count);
        std::optional<double> last;
        for (std::size_t i = 0; i < count; ++i) {
            prev_value[i] = last;
            if (records[begin + i].targets[t]) last = records[begin + i].targets[t];
        }

        for (std::size_t last_idx = length - 1; last_idx < count; ++last_idx) {
            const std::size_t first_idx = last_idx + 1 - length;
            const SampleRecord& final_rec = records[begin + last_idx];
            if (!final_rec.targets[t]) continue;

            bool ok = true;
            for (std::size_t i = first_idx; i + 1 <= last_idx && ok; ++i) {
                ok = records[begin + i + 1].date.serial() - records[begin + i].date.serial() == 1;
            }
            for (std::size_t i = first_idx; i <= last_idx && ok; ++i) {
                if (!prev_value[i]) ok = false;
                for (std::size_t f = 0; f < kFeatureCount && ok; ++f) {
                    if (!records[begin + i].features[f]) ok = false;
                }
            }
            if (!ok) continue;

            SeriesWindow w;
            w.city = final_rec.city;
            w.pollutant = pollutant;
            w.seq_len = length;
            w.n_features = n_features;
            w.features.resize(length * n_features);
            for (std::size_t i = first_idx; i <= last_idx; ++i) {
                const std::size_t row = i - first_idx;
                for (std::size_t f = 0; f < kFeatureCount; ++f) {
                    w.features[row * n_features + f] = *records[begin + i].features[f];
                }
                w.features[row * n_features + kFeatureCount] = *prev_value[i];
            }
            w.target = *final_rec.targets[t];
            w.end_date = final_rec.date;
            windows.push_back(std::move(w));
        }
        begin = end;
    }
    return windows;
}

WindowSplit split_windows(const std::vector<SeriesWindow>& windows) {
    WindowSplit split;
    for (const SeriesWindow& w : windows) {
        const Date first = Date::from_serial(w.end_date.serial() -
                                             static_cast<long long>(w.seq_len) + 1);
        if (in_test_range(w.end_date)) {
            split.test.push_back(w);
        } else if (w.end_date < kTestStart || first > kTestEnd) {
            split.train.push_back(w);
        }
        // Windows that straddle the boundary without ending inside the test
        // range belong to neither side.
    }
    return split;
}

Quartiles summarize_distribution(const std::vector<SampleRecord>& records,
                                 const std::string& field) {
    std::vector<double> values;
    bool known = false;
    for (std::size_t t = 0; t < 6; ++t) {
        if (field == pollutant_column(kAllPollutants[t]) || field == pollutant_name(kAllPollutants[t])) {
            known = true;
            for (const SampleRecord& rec : records) {
                if (rec.targets[t]) values.push_back(*rec.targets[t]);
            }
            break;
        }
    }
    if (!known) {
        for (std::size_t f = 0; f < kFeatureCount; ++f) {
            if (field == kFeatureNames[f]) {
                known = true;
                for (const SampleRecord& rec : records) {
                    if (rec.features[f]) values.push_back(*rec.features[f]);
                }
                break;
            }
        }
    }
    if (!known) throw DataError("summarize_distribution: unknown field '" + field + "'");
    if (values.empty()) {
        throw DataError("summarize_distribution: no observed values of '" + field + "'");
    }
    std::sort(values.begin(), values.end());
    auto percentile = [&](double p) {
        const double h = p * static_cast<double>(values.size() - 1);
        const std::size_t lo = static_cast<std::size_t>(h);
        if (lo + 1 >= values.size()) return values.back();
        return values[lo] + (h - static_cast<double>(lo)) * (values[lo + 1] - values[lo]);
    };
    return Quartiles{percentile(0.25), percentile(0.50), percentile(0.75)};
}

} // namespace coslin
