import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "jsdom",
    globalSetup: ["./test/live-server.ts"],
    testTimeout: 30000,
    hookTimeout: 120000,
  },
});
