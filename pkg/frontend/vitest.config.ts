import { defineConfig } from "vitest/config";

// The sources import with explicit ".js" so the tsc output runs natively in
// the browser; strip the extension for vite's on-the-fly TS resolution.
export default defineConfig({
  resolve: {
    alias: [{ find: /^(\.{1,2}\/.*)\.js$/, replacement: "$1" }],
  },
  test: {
    environment: "node",
    include: ["tests/**/*.test.ts"],
  },
});
