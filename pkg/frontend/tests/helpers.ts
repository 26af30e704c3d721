import { readFileSync } from "node:fs";
import { join } from "node:path";

/** Recorded API response, parsed fresh per call so tests cannot share state. */
export function fixture<T>(name: string): T {
  const path = join(process.cwd(), "tests", "fixtures", `${name}.json`);
  return JSON.parse(readFileSync(path, "utf8")) as T;
}
